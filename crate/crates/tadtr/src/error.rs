use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated payload, needed {needed} bytes but only {available} remain")]
    Truncated { path: PathBuf, needed: u64, available: u64 },
    #[error("{path}: declared extents {extents:?} overflow")]
    ExtentOverflow { path: PathBuf, extents: Vec<u64> },
    #[error("{path}: {extra} trailing bytes after the last entry")]
    TrailingBytes { path: PathBuf, extra: u64 },
    #[error("{path}: malformed entry: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("checkpoint does not fit the model: {0}")]
    CheckpointMismatch(String),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("annotation of video `{video_id}`: {reason}")]
    Annotation { video_id: String, reason: String },
    #[error("video `{video_id}` uses label `{label}` missing from the class list")]
    UnknownLabel { video_id: String, label: String },
    #[error("config {origin}: {reason}")]
    Config { origin: String, reason: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Core(#[from] tadtr_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<tadtr_core::TensorError> for Error {
    fn from(e: tadtr_core::TensorError) -> Self {
        Self::Core(e.into())
    }
}

/// Maps an IO failure to [`Error::Io`] tagged with `path`.
pub fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
