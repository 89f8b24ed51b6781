use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// Each variant maps onto one process exit code (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward pass already ran on this graph; reset it first")]
    BackwardTwice,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config hash mismatch: checkpoint has {checkpoint}, data has {data}")]
    ConfigMismatch { checkpoint: String, data: String },

    #[error("usage: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 usage, 3 I/O, 4 format/version/config mismatch, 5 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Invalid(_) => 2,
            Error::Io { .. } => 3,
            Error::Format(_) | Error::ConfigMismatch { .. } | Error::Shape(_) => 4,
            Error::NonFinite(_) | Error::Divergence(_) | Error::BackwardTwice => 5,
        }
    }
}
