use thiserror::Error;

/// Errors raised while ingesting data, building a model or evaluating it.
#[derive(Debug, Error)]
pub enum JmError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{0} is outside the domain [{1}, {2}]")]
    OutOfRange(f64, f64, f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("validation failed with {0} violation(s)")]
    Validation(usize),

    #[error("unknown block: {0}")]
    UnknownBlock(String),
}

pub type Result<T, E = JmError> = std::result::Result<T, E>;

pub(crate) fn numerical(msg: impl Into<String>) -> JmError {
    JmError::Numerical(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> JmError {
    JmError::InvalidInput(msg.into())
}
