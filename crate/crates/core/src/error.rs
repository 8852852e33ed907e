use std::io;

use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid architecture at {block}: {reason}")]
    InvalidArchitecture { block: String, reason: String },

    #[error("backward seed must be a scalar node, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("DeepLIFT backward requires a graph with a baseline cache")]
    MissingBaseline,

    #[error("operation `{op}` is not supported in {mode} backward")]
    UnsupportedInMode {
        op: &'static str,
        mode: &'static str,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("mask has no ocean cells")]
    AllLand,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("series too short: need at least {required} months, got {got}")]
    SeriesTooShort { required: usize, got: usize },

    #[error("insufficient samples: need {needed}, have {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("unrecognized format (expected magic {expected:?})")]
    UnrecognizedFormat { expected: &'static str },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("payload does not match header: {0}")]
    PayloadMismatch(String),

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CoreError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }
}
