use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or layer received operands whose dimensions do not line up.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unsupported configuration in {op}: {detail}")]
    Unsupported { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("duplicate class name `{0}`")]
    DuplicateName(String),

    #[error("no embedding for `{0}`")]
    MissingEmbedding(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("unknown freezing policy `{0}`")]
    UnknownPolicy(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },

    #[error("mask value {0} is not covered by the remap table")]
    UncoveredValue(u8),

    #[error("remap collision: {0}")]
    RemapCollision(String),

    #[error("patch plan rejected: {0}")]
    Coverage(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("loss became non-finite at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
