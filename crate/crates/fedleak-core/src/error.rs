//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad layer wiring, out-of-range hyperparameter, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Structurally invalid input data (shape mismatch, empty dataset, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed on-disk format (IDX magic, truncated record, bad manifest).
    #[error("format error: {0}")]
    Format(String),

    /// Numeric failure at runtime (non-finite loss, degenerate quantiles, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A partition or sampling request that cannot be satisfied.
    #[error("allocation error: {0}")]
    Allocation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn allocation(msg: impl Into<String>) -> Self {
        Error::Allocation(msg.into())
    }
}
