use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: unsupported volume format ({reason})")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("{path}: {count} non-finite voxel(s), first at index {first:?}")]
    NonFiniteVoxels {
        path: PathBuf,
        count: usize,
        first: Vec<usize>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("parameter `{0}` missing from weight file")]
    MissingParam(String),

    #[error("time series has {found} frames; at least {required} are required when discarding {discard}")]
    TooFewFrames {
        found: usize,
        required: usize,
        discard: usize,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("config digest mismatch: checkpoint {checkpoint}, config {config}")]
    DigestMismatch { checkpoint: String, config: String },

    #[error("subject `{subject}`: {source}")]
    Subject {
        subject: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Nifti(#[from] nifti::NiftiError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

    pub fn for_subject(self, subject: &str) -> Self {
        Error::Subject {
            subject: subject.to_string(),
            source: Box::new(self),
        }
    }

    /// True for failures of the optimization itself rather than of inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteLoss { .. } => true,
            Error::Subject { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
