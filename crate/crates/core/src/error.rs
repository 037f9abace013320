use thiserror::Error;

/// Errors raised by the search, privacy and federation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("noise multiplier is zero: no DP guarantee")]
    NoPrivacy,

    #[error("protocol error (party {party}, phase {phase}): {detail}")]
    Protocol {
        party: u32,
        phase: String,
        detail: String,
    },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;
