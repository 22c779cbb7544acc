use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by `kfe-core`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("unsupported format version {found:?} (expected {expected:?})")]
    VersionMismatch { expected: String, found: String },

    #[error("descriptor blob is {actual} bytes, expected {expected}")]
    BlobLength { expected: u64, actual: u64 },

    #[error("missing cloud file {}", .0.display())]
    MissingCloud(PathBuf),

    #[error("manifest checksum mismatch (recorded {recorded}, computed {computed})")]
    ChecksumMismatch { recorded: String, computed: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn format_err(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        what,
        detail: detail.into(),
    }
}
