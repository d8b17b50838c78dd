use thiserror::Error;

use crate::grid::Lattice;

#[derive(Debug, Error)]
pub enum Error {
    #[error("lattice mismatch: expected {expected:?}, found {found:?}")]
    LatticeMismatch { expected: Lattice, found: Lattice },

    #[error("cube of side {side} cannot be subdivided on the lattice")]
    ResolutionFloor { side: i64 },

    #[error("invalid cube: {0}")]
    InvalidCube(String),

    #[error("negative value {value} at cell {cell:?}")]
    Negative { cell: [i64; 2], value: f64 },

    #[error("non-positive weight {value} at cell {cell:?}")]
    NonPositiveWeight { cell: [i64; 2], value: f64 },

    #[error("witness set is empty")]
    EmptyWitness,

    #[error("point {cell:?} lies outside the scope cube")]
    ScopeViolation { cell: [i64; 2] },

    #[error("Dini integral diverges (partial integral {partial} after {segments} segments)")]
    DiniDivergence { partial: f64, segments: usize },

    #[error("power iteration did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("cube of side {side} is outside the supported scale range")]
    ScaleRange { side: i64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unknown kernel '{0}'")]
    UnknownKernel(String),

    #[error("config error in field '{field}': {message}")]
    Config { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
