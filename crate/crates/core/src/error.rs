use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures reported by binary file readers.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed content: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no valid pixels under mask")]
    EmptyMask,
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("scale mismatch: checkpoint was trained at scale {checkpoint}, requested {requested}")]
    ScaleMismatch { checkpoint: usize, requested: usize },
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config { field: field.to_string(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
