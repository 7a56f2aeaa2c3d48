use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step} (stage {stage})")]
    NonFiniteLoss { stage: u8, step: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {len} exceeds context window {max_ctx} ({points} point tokens, {instruction} instruction tokens, {response} response tokens)")]
    ContextOverflow {
        len: usize,
        max_ctx: usize,
        points: usize,
        instruction: usize,
        response: usize,
    },

    #[error("unknown word `{0}`")]
    UnknownWord(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("bad format: {0}")]
    Format(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("encoder failure: {0}")]
    Encoder(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
