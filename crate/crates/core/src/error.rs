//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or weight-array dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Dataset is missing, malformed, or empty.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Numeric failure: degenerate quantization group, non-finite values, …
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed model file (bad magic, truncation, version skew, …).
    #[error("bad model file: {0}")]
    Format(String),

    #[error("unknown group '{0}'")]
    UnknownGroup(String),

    #[error("missing quantization spec for group '{0}'")]
    MissingSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
