use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("query budget of {limit} exhausted for sample {sample}")]
    QueryBudgetExceeded { sample: usize, limit: usize },

    #[error("training did not reach {target:.3} accuracy after {epochs} epochs (final {achieved:.3}; per-class {per_class:?})")]
    TrainingFailed {
        target: f64,
        achieved: f64,
        epochs: usize,
        per_class: Vec<f64>,
    },

    #[error("could not find {wanted} eligible samples after {draws} draws (eligible per class: {per_class:?})")]
    NoEligibleSamples {
        wanted: usize,
        draws: usize,
        per_class: Vec<usize>,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
