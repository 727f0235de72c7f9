//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed metadata in {path}: {reason}")]
    Metadata { path: PathBuf, reason: String },

    #[error("shape mismatch for {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("checksum mismatch for {path}: expected {expected}, computed {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("sample {id} not found under {root}")]
    MissingSample { id: String, root: PathBuf },

    #[error("non-finite value at flat index {index} (value {value})")]
    NonFinite { index: usize, value: f64 },

    #[error("record {id} failed validation: {violations:?}")]
    InvalidRecord { id: String, violations: Vec<String> },

    #[error("sequence too short: {remaining} frames remain, need at least {minimum}")]
    TooShort { remaining: usize, minimum: usize },

    #[error("mask pool is empty")]
    EmptyMaskPool,

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("non-finite loss while processing sample {sample_id}")]
    NonFiniteLoss { sample_id: String },

    #[error("empty dataset split {split}")]
    EmptySplit { split: String },

    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: impl Into<String>, expected: String, actual: String) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
