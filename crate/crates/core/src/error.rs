use thiserror::Error;

/// Errors raised by configuration, ingestion and inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parameter `{field}` must be {requirement}, got {value}")]
    InvalidParameter {
        field: String,
        requirement: &'static str,
        value: f64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("all {0} restarts failed; last error: {1}")]
    AllRestartsFailed(usize, String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn positive(field: impl Into<String>, value: f64) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            requirement: "strictly positive",
            value,
        }
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::AllRestartsFailed(..))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
