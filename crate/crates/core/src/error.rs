use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("box has zero area after clipping")]
    EmptyBox,

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("{path}:{line}: malformed label: {reason}")]
    MalformedLabel {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("label file {label} has no matching image")]
    MissingImage { label: PathBuf },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("need at least {needed} images to fit statistics, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("{len} objects do not fit in a list of length {capacity}")]
    Overflow { len: usize, capacity: usize },

    #[error("foreground pool has no images for category `{0}`")]
    PoolMiss(String),

    #[error("text embedder returned shape {got:?}, expected {expected:?}")]
    BadEmbedderShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad noise schedule: {0}")]
    BadSchedule(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("split `{split}` has no {class} samples")]
    ClassMissing { split: String, class: String },

    #[error("stage `{stage}` is missing upstream artifact {artifact}")]
    MissingArtifact { stage: String, artifact: String },

    #[error("stage `{stage}`: upstream artifact {artifact} changed since it was produced")]
    StaleUpstream { stage: String, artifact: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by an unmet precondition (missing or stale
    /// inputs, bad configuration) rather than a failure during the work.
    pub fn is_precondition(&self) -> bool {
        matches!(
            self,
            Error::MissingArtifact { .. }
                | Error::StaleUpstream { .. }
                | Error::Config(_)
                | Error::InsufficientData { .. }
                | Error::PoolMiss(_)
                | Error::ClassMissing { .. }
                | Error::InvalidDataset(_)
                | Error::MissingImage { .. }
                | Error::MalformedLabel { .. }
        )
    }
}
