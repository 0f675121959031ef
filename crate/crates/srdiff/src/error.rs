//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or map shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced NaN or infinity where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// I/O failure with the offending path attached.
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },

    /// A file's bytes do not match the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration is internally inconsistent or unparseable.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Wrap an I/O error with the path it came from.
    pub fn file(path: &std::path::Path, source: std::io::Error) -> Error {
        Error::File {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
