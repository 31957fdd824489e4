use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The normalizer of a belief update vanished: every pose with mass was
    /// assigned a zero likelihood.
    #[error("degenerate posterior: normalizing constant is zero")]
    DegeneratePosterior,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    /// No training values could be collected for a (family, level, scale) triple.
    #[error("training coverage gap at family {k}, level {i}, scale {s}")]
    TrainingCoverage { k: usize, i: u32, s: usize },

    #[error("model coverage gap at family {k}, level {i}")]
    ModelCoverage { k: usize, i: u32 },

    #[error("model/config mismatch: {0}")]
    Mismatch(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
