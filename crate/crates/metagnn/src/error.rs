use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for an operation.
    #[error("{op}: dimension mismatch {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// An operation produced NaN or infinity.
    #[error("{0}: non-finite result")]
    NonFinite(String),

    /// A caller-facing contract was violated.
    #[error("{0}")]
    Contract(String),

    /// An index exceeded its bound.
    #[error("{what}: index {index} out of bounds ({bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// A data file could not be parsed.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Task sampling could not satisfy its constraints.
    #[error("sampling: {0}")]
    Sampling(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
