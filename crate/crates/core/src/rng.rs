//! Counter-based random substreams.
//!
//! Every draw is addressed by `(seed, kind, a, b)`, typically a bus or
//! coordinate index and a tick, so any frame can be regenerated on its own and
//! parallel workers never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    Injection = 1,
    Noise = 2,
    OutageTime = 3,
    Replication = 4,
    Bootstrap = 5,
    CurrentNoise = 6,
    Placement = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of the address, usable as a derived seed.
pub fn derive_seed(seed: u64, kind: StreamKind, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ kind as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

pub fn substream(seed: u64, kind: StreamKind, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = derive_seed(seed, kind, a, b);
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&h.to_le_bytes());
        h = splitmix64(h);
    }
    ChaCha8Rng::from_seed(key)
}
