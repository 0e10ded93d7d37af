use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the separation toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("AUC is undefined: {0}")]
    UndefinedAuc(&'static str),

    #[error("ingestion failed for {} item(s): {}", .offenders.len(), .offenders.join("; "))]
    Ingestion { offenders: Vec<String> },

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("WAV error on {path}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("malformed {what}: {detail}")]
    Parse { what: String, detail: String },

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

    pub(crate) fn parse(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
