use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("model lacks the {0} branch")]
    Capability(&'static str),

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("non-finite value: {0}")]
    Numerical(String),

    #[error("non-finite loss at step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
