//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training set is empty")]
    EmptyTrain,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("tree depth {tree} does not match configured layer count {expected}")]
    DepthMismatch { tree: usize, expected: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("zero-degree node in normalization weights: {0}")]
    ZeroDegree(String),

    #[error("user {user} interacts with every item; no negative can be sampled")]
    SaturatedUser { user: u32 },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {details}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        details: String,
    },

    #[error("snapshot does not match config: {0}")]
    SnapshotMismatch(String),

    #[error("malformed snapshot: {0}")]
    SnapshotFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error("gradient check failed: max relative error {max_err:.3e} exceeds gate {gate:.1e}")]
    GradCheckFailed { max_err: f64, gate: f64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
