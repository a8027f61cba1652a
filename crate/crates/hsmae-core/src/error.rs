//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (bad magic, truncated payload, bad JSON).
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Shape or metadata disagreement between two values.
    #[error("dimension mismatch: {0}")]
    Mismatch(String),

    /// Caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Every token of the grid is masked; the encoder needs at least one.
    #[error("no visible tokens: the mask hides the entire grid")]
    NoVisibleTokens,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
