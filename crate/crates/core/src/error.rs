use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation precondition (shape mismatch, bad range, empty input).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A container or checkpoint file is malformed or has the wrong version.
    #[error("format error: {0}")]
    Format(String),

    /// An I/O failure, annotated with the path it happened on.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A loss or gradient became non-finite during training.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
