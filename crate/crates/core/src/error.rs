use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("array `{name}` in {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        name: String,
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("array `{name}` contains a non-finite value at element {index}")]
    NonFinite { name: String, index: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("split: {0}")]
    Split(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("unknown variant `{name}`; valid variants: {valid}")]
    UnknownVariant { name: String, valid: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
