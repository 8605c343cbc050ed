use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = IerError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IerError {
    /// An input violates the mathematical precondition of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IerError {
    pub fn domain(msg: impl Into<String>) -> Self {
        IerError::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        IerError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        IerError::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IerError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            IerError::Usage(_) | IerError::Config(_) => 2,
            IerError::Io { .. } | IerError::Format(_) => 3,
            IerError::Domain(_) | IerError::Numeric(_) => 4,
        }
    }
}
