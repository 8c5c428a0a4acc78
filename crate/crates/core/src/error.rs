use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("batch layout error: {0}")]
    BatchLayout(String),

    #[error("identity {identity} has {count} instances in batch, expected {expected}")]
    IdentityCount {
        identity: usize,
        count: usize,
        expected: usize,
    },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate batch: train-mode normalization needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),

    #[error("mining error: {0}")]
    Mining(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("no student/teacher view pairs to compare")]
    EmptyPair,

    #[error("no valid gallery match for queries {queries:?}")]
    NoMatch { queries: Vec<usize> },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("profiler unavailable: {0}")]
    Busy(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line tool.
    ///
    /// 2 configuration, 3 I/O, 4 data or protocol, 5 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Range(_) | Error::ShapeMismatch(_) | Error::Json(_) => 2,
            Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) | Error::Busy(_) => 3,
            Error::NonFiniteLoss { .. } => 5,
            Error::BatchLayout(_)
            | Error::IdentityCount { .. }
            | Error::InvalidSample(_)
            | Error::Parse { .. }
            | Error::Split(_)
            | Error::MissingFile(_)
            | Error::DegenerateBatch(_)
            | Error::Mining(_)
            | Error::EmptyPair
            | Error::NoMatch { .. }
            | Error::Degenerate(_)
            | Error::Data(_) => 4,
        }
    }
}
