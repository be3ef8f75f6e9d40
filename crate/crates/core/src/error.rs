use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples in {0}")]
    NoSamples(PathBuf),

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("label count mismatch: {labels} labels for {samples} samples")]
    LabelCountMismatch { labels: usize, samples: usize },

    #[error("invalid labels file {path}: {reason}")]
    LabelsFile { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    Length {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config key `{0}`")]
    ConfigKey(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("divergence detected in network `{network}`")]
    Divergence { network: String },

    #[error("training diverged at step {step}: term `{term}` is not finite")]
    StepDiverged { step: u64, term: String },

    #[error("backward called on a consumed record")]
    RecordConsumed,

    #[error("matrix is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("labels are required: {0}")]
    MissingLabels(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn length(what: &'static str, left: usize, right: usize) -> Self {
        Error::Length { what, left, right }
    }
}
