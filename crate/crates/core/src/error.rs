use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("could only place {placed} of {requested} nuclei after {attempts} attempts")]
    OverDense {
        requested: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("degenerate proposal box {0:?}: area below one feature cell")]
    DegenerateBox([f64; 4]),

    #[error("contrastive term needs at least one positive key")]
    EmptyPositives,

    #[error("zero-norm embedding vector")]
    ZeroNorm,

    #[error("no sampled vectors on the {0} side")]
    EmptySide(&'static str),

    #[error("duplicate image id {0}")]
    DuplicateImage(String),

    #[error("{stage} training diverged at step {step} (lr {lr})")]
    Diverged {
        stage: &'static str,
        step: usize,
        lr: f64,
    },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}
