use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical domain error: {0}")]
    Numerical(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("data error at {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum { path: PathBuf, expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("model error: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data { path: path.into(), reason: reason.into() }
    }

    /// True for failures caused by non-finite or out-of-domain arithmetic.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
