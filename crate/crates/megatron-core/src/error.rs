//! Error types shared across the toolkit.

use thiserror::Error;

/// Pipeline stage names, used to tag errors raised inside the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Dataset,
    TrainSurrogate,
    GenTrigger,
    Poison,
    TrainVictim,
    Evaluate,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Dataset => "dataset",
            Stage::TrainSurrogate => "train-surrogate",
            Stage::GenTrigger => "gen-trigger",
            Stage::Poison => "poison",
            Stage::TrainVictim => "train-victim",
            Stage::Evaluate => "evaluate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid argument or out-of-range value.
    #[error("input error: {0}")]
    Input(String),

    /// An API was called in a state its contract forbids.
    #[error("contract error: {0}")]
    Contract(String),

    /// A configured bound was exceeded (e.g. diffusion area larger than 3x trigger).
    #[error("bound error: {0}")]
    Bound(String),

    /// Numerical optimization produced a non-finite value.
    #[error("optimization error: {0}")]
    Optimization(String),

    /// Configuration file failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// An expected upstream artifact is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// An artifact's content hash does not match what a downstream stage recorded.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Refusing to overwrite existing outputs without --force.
    #[error("unsafe overwrite: {0}")]
    UnsafeOverwrite(String),

    /// Failure wrapped with the pipeline stage it occurred in.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn in_stage(self, stage: Stage) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
