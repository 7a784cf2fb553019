use std::fmt;

/// Errors produced by the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unreadable file {path}: {reason}")]
    Unreadable { path: String, reason: String },

    #[error("missing spacing metadata in {0}")]
    MissingSpacing(String),

    #[error("HU values outside [-1024, 3071]: {count} voxels, observed range [{min}, {max}]")]
    HuOutOfRange { count: usize, min: f64, max: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate embedding: pre-normalization norm {0:e}")]
    DegenerateEmbedding(f64),

    #[error("non-finite {family} feature")]
    NonFiniteFeature { family: &'static str },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("training aborted at step {step}: non-finite loss")]
    TrainingAborted {
        step: usize,
        last_good: Box<crate::checkpoint::Checkpoint>,
    },

    #[error("EM collapse: component {0} weight fell below 1e-8 after re-initialization")]
    EmCollapse(usize),

    #[error("undefined HD95: {0} mask is empty")]
    UndefinedHd95(&'static str),

    #[error(
        "config hash mismatch: checkpoint was trained with {checkpoint}, request has {request}"
    )]
    HashMismatch { checkpoint: String, request: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidArgument(msg.to_string())
    }

    pub(crate) fn shape(msg: impl fmt::Display) -> Self {
        Error::ShapeMismatch(msg.to_string())
    }
}

/// Tags errors from a pipeline stage with the stage name.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
