//! Error taxonomy shared by the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation was called outside its stated preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input values outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tape or training-state misuse (double backward, missing checkpoint).
    #[error("state error: {0}")]
    State(String),

    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// File I/O, always with the offending path.
    #[error("io error: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (checkpoint, image, config).
    #[error("format error: {path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
