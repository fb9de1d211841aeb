use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid model:\n{0}")]
    InvalidModel(ValidationReport),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("occupation entry {index} is negative ({value:e})")]
    NegativeOccupation { index: usize, value: f64 },

    #[error("inconsistent soft pair at state {state}: |v - logsumexp(q)| = {gap:e}")]
    InconsistentSoftPair { state: usize, gap: f64 },

    #[error("trajectory parse error at line {line}: {msg}")]
    TrajectoryParse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
