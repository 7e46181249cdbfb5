//! Feeder files and bundled test networks.
//!
//! A feeder file is TOML with one `[[bus]]` table per bus and one
//! `[[branch]]` table per line:
//!
//! ```toml
//! [[bus]]
//! id = 1          # 1..=M, every id exactly once
//! slack = true    # optional, default false
//! der = false     # optional, default false
//!
//! [[branch]]
//! from = 1
//! to = 2
//! conductance = 4.0     # per-unit g
//! susceptance = -6.0    # per-unit b
//! in_service = true     # optional, default true
//! ```
//!
//! Unknown keys are rejected. Parallel branches between the same pair are
//! merged by summing their admittances.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Branch, BranchKey, BusId, GridTopology};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederFile {
    #[serde(default)]
    bus: Vec<BusEntry>,
    #[serde(default)]
    branch: Vec<BranchEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusEntry {
    id: usize,
    #[serde(default)]
    slack: bool,
    #[serde(default)]
    der: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchEntry {
    from: usize,
    to: usize,
    conductance: f64,
    susceptance: f64,
    #[serde(default = "yes")]
    in_service: bool,
}

fn yes() -> bool {
    true
}

/// Parses a feeder file and checks that the in-service network reaches every
/// bus from a slack bus.
pub fn parse_feeder(text: &str) -> Result<GridTopology> {
    let file: FeederFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let m = file.bus.len();
    let mut ids = BTreeSet::new();
    for b in &file.bus {
        if b.id == 0 || b.id > m {
            return Err(Error::BusOutOfRange {
                bus: BusId(b.id),
                bus_count: m,
            });
        }
        if !ids.insert(b.id) {
            return Err(Error::Parse(format!("bus {} listed twice", b.id)));
        }
    }
    let slack: Vec<BusId> = file.bus.iter().filter(|b| b.slack).map(|b| BusId(b.id)).collect();
    if slack.is_empty() {
        return Err(Error::Parse("feeder has no slack bus".into()));
    }
    let der = file.bus.iter().filter(|b| b.der).map(|b| BusId(b.id));

    let mut merged: BTreeMap<BranchKey, Branch> = BTreeMap::new();
    for e in &file.branch {
        let y = Complex64::new(e.conductance, e.susceptance);
        let key = BranchKey::from_pair(e.from, e.to);
        match merged.get_mut(&key) {
            Some(existing) => {
                if existing.in_service != e.in_service {
                    return Err(Error::Parse(format!(
                        "parallel branches {key} disagree on in_service"
                    )));
                }
                existing.admittance += y;
            }
            None => {
                let mut br = Branch::new(e.from, e.to, y);
                br.in_service = e.in_service;
                merged.insert(key, br);
            }
        }
    }
    let topo = GridTopology::new(m, merged.into_values().collect(), slack, der)?;
    if !topo.is_slack_connected() {
        return Err(Error::Parse(
            "in-service network does not connect every bus to a slack bus".into(),
        ));
    }
    Ok(topo)
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<GridTopology> {
    parse_feeder(&std::fs::read_to_string(path)?)
}

/// Writes a topology in the feeder file format.
pub fn feeder_to_toml(topo: &GridTopology) -> String {
    let file = FeederFile {
        bus: topo
            .buses()
            .map(|b| BusEntry {
                id: b.0,
                slack: topo.is_slack(b),
                der: topo.der().contains(&b),
            })
            .collect(),
        branch: topo
            .branches()
            .iter()
            .map(|b| BranchEntry {
                from: b.from.0,
                to: b.to.0,
                conductance: b.admittance.re,
                susceptance: b.admittance.im,
                in_service: b.in_service,
            })
            .collect(),
    };
    toml::to_string(&file).expect("feeder serialization cannot fail")
}

const PATH3: &str = include_str!("../../feeders/path3.toml");
const LOOP8: &str = include_str!("../../feeders/loop8.toml");
const RADIAL8: &str = include_str!("../../feeders/radial8.toml");

pub const BUNDLED_NAMES: [&str; 3] = ["path3", "loop8", "radial8"];

/// Bundled feeder by name.
pub fn bundled(name: &str) -> Option<GridTopology> {
    let text = match name {
        "path3" => PATH3,
        "loop8" => LOOP8,
        "radial8" => RADIAL8,
        _ => return None,
    };
    Some(parse_feeder(text).expect("bundled feeder files are valid"))
}

pub fn bundled_feeders() -> Vec<(&'static str, GridTopology)> {
    BUNDLED_NAMES
        .iter()
        .map(|n| (*n, bundled(n).expect("listed name")))
        .collect()
}

fn random_admittance(rng: &mut ChaCha8Rng) -> Complex64 {
    let mag: f64 = rng.random_range(1.0..10.0);
    let r_over_x: f64 = rng.random_range(0.5..2.0);
    // z = |z| (r + jx) / |r + jx| with x = 1, and y = 1/z
    let z = Complex64::new(r_over_x, 1.0) / Complex64::new(r_over_x, 1.0).norm() / mag;
    z.inv()
}

/// Random radial feeder on `bus_count` buses rooted at slack bus 1, plus up to
/// `loops` extra branches. Each bus `k ≥ 2` hangs off a uniformly chosen
/// earlier bus. Loop branches join two non-slack buses at graph distance at
/// least 3, so the result never contains a triangle. Fewer loops are added if
/// no such pair is left.
pub fn random_feeder(bus_count: usize, loops: usize, seed: u64) -> Result<GridTopology> {
    if bus_count < 1 {
        return Err(Error::InvalidParameter("feeder needs at least one bus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); bus_count + 1];
    let mut branches = Vec::new();
    for k in 2..=bus_count {
        let parent = rng.random_range(1..k);
        adj[k].insert(parent);
        adj[parent].insert(k);
        branches.push(Branch::new(parent, k, random_admittance(&mut rng)));
    }
    for _ in 0..loops {
        let mut candidates = Vec::new();
        for a in 2..=bus_count {
            for b in (a + 1)..=bus_count {
                let near = adj[a].contains(&b) || adj[a].intersection(&adj[b]).next().is_some();
                if !near {
                    candidates.push((a, b));
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        let (a, b) = candidates[rng.random_range(0..candidates.len())];
        adj[a].insert(b);
        adj[b].insert(a);
        branches.push(Branch::new(a, b, random_admittance(&mut rng)));
    }
    GridTopology::new(bus_count, branches, [BusId(1)], [])
}
