use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file exists but does not follow the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// Data on disk contradicts itself (counts, resolutions).
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Invalid parameters or incompatible shapes.
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("sidecar error [{code}]: {message}")]
    Sidecar { code: String, message: String },

    /// The endpoint cannot perform the requested operation.
    #[error("capability error: {0}")]
    Capability(String),

    #[error("schema error: {0}")]
    Schema(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn sidecar(code: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Sidecar {
            code: code.into(),
            message: message.into(),
        }
    }
}
