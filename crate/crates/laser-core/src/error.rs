//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed input data (bad record, unusable sequence, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration or dimension mismatch between components.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure (non-finite values, zero-norm vectors, NaN loss).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
