use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: argument {value} outside the function domain")]
    Domain { op: &'static str, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },

    #[error("no valid pixels")]
    EmptyMask,

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch { what: String, expected: usize, got: usize },

    #[error("tape does not belong to the current parameters")]
    StaleTape,

    #[error("npy {path}: {msg}")]
    Npy { path: PathBuf, msg: String },

    #[error("manifest record {record}: {msg}")]
    Manifest { record: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { what, msg: msg.into() }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimMismatch { what: what.into(), expected, got }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
