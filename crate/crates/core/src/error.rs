//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The file is not a well-formed little-endian float32 tensor container.
    #[error("format error: {0}")]
    Format(String),

    /// Tensor rank or dimensions do not match what the operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite or negative value where the contract forbids one.
    #[error("value error: {0}")]
    Value(String),

    /// The token count cannot be laid out on the required grid.
    #[error("grid error: {0}")]
    Grid(String),

    /// Invalid run configuration (ratio out of range, unknown strategy).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Caller-supplied data violates a precondition (duplicate indices, length mismatch).
    #[error("validation error: {0}")]
    Validation(String),

    /// Statistic undefined for the input (all-zero mass, empty budget).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 usage, 2 data/format, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Io { .. } => 3,
            _ => 2,
        }
    }
}
