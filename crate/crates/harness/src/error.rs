use std::path::PathBuf;

use dsbd_core::DecodeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Decode(#[from] DecodeError),

    #[error("sample of {got} trials is below the required {need}")]
    SampleTooSmall { got: u64, need: u64 },

    #[error("index sets differ: {left} vs {right} cells")]
    IndexMismatch { left: usize, right: usize },

    #[error("invalid experiment spec: {0}")]
    Spec(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("report serialization failed: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
