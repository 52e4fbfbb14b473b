use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("no image files found in {0}")]
    EmptyDataset(PathBuf),

    #[error("labelled id `{id}` has no mask file (expected {expected})")]
    MissingMask { id: String, expected: PathBuf },

    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0} contains values outside {{0, 1}}")]
    NonBinary(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("spatial size {height}x{width} is not divisible by {divisor}")]
    IndivisibleSize {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("model has no rotation head")]
    MissingRotationHead,

    #[error("label {0} is outside 0..4")]
    LabelOutOfRange(usize),

    #[error("transform {0} cannot be inverted on a {1}x{2} map")]
    NonInvertibleTransform(&'static str, usize, usize),

    #[error("non-finite loss in {phase}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        phase: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("unknown method `{name}`; valid methods: {valid}")]
    UnknownMethod { name: String, valid: String },

    #[error("placement failed: {0}")]
    Placement(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incomplete results: {0}")]
    Incomplete(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration and usage problems map to exit code 2, everything else to 1.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::UnknownMethod { .. } | Error::Missing(_)
        )
    }
}
