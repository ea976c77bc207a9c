use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero spatial extent in {0}")]
    EmptySpatial(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("zero-norm vector passed to cosine distance")]
    ZeroNorm,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid triplet ({anchor}, {positive}, {negative}): {reason}")]
    Triplet {
        anchor: usize,
        positive: usize,
        negative: usize,
        reason: &'static str,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("numerical abort at epoch {epoch} step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("malformed SNRT data: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding failed: {0}")]
    Image(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Process exit code: 2 for configuration problems, 3 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::InvalidArgument(_) => 2,
            Error::Divergence { .. } | Error::NonFinite(_) => 3,
            _ => 1,
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
