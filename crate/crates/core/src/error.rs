use thiserror::Error;

use crate::grid::BusId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bus {bus} outside 1..={bus_count}")]
    BusOutOfRange { bus: BusId, bus_count: usize },

    #[error("branch {from}-{to} connects a bus to itself")]
    SelfLoop { from: BusId, to: BusId },

    #[error("duplicate branch {from}-{to}")]
    DuplicateBranch { from: BusId, to: BusId },

    #[error("in-service branch {from}-{to} has zero admittance")]
    ZeroAdmittance { from: BusId, to: BusId },

    #[error("no branch {from}-{to} in topology")]
    UnknownBranch { from: BusId, to: BusId },

    #[error("branch {from}-{to} is already out of service")]
    BranchOutOfService { from: BusId, to: BusId },

    #[error("singular {block} block over buses {buses:?}")]
    SingularBlock { block: &'static str, buses: Vec<BusId> },

    #[error("singular conditioning block over coordinates {coords:?}")]
    SingularConditioning { coords: Vec<usize> },

    #[error("matrix is not positive definite even after ridge regularization")]
    NotPositiveDefinite,

    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
