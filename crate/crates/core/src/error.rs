use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}: backward called without a matching forward")]
    MissingCache(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("download failed: {0}")]
    Download(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
