use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SfiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SfiError {
    #[error("empty support: the allowed set has no positions")]
    EmptySupport,

    #[error("non-finite logit {value} at row {row}, column {col}")]
    NonFiniteLogit { row: usize, col: usize, value: f64 },

    #[error("row {row} of the logit window has no finite entry")]
    FullyMaskedRow { row: usize },

    #[error("{what}: expected length {expected}, got {got}")]
    Misaligned {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("distributions are defined on different supports")]
    SupportMismatch,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("selected position {position} for head {head} overlaps the sink/recent set")]
    SelectionOverlap { head: usize, position: usize },

    #[error(
        "selected position {position} for head {head} is outside the prefix of length {prefix_len}"
    )]
    SelectionOutOfRange {
        head: usize,
        position: usize,
        prefix_len: usize,
    },

    #[error("context overflow: prefix of {needed} positions exceeds maximum {max}")]
    ContextOverflow { needed: usize, max: usize },

    #[error("position {position} out of range for prefix length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("position {position} has not been written to the paged store")]
    UnwrittenPosition { position: usize },

    #[error("compact buffer for layer {layer} is stale: reorganization pending")]
    StaleCompact { layer: usize },

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("invalid model spec: {0}")]
    InvalidModelSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("malformed weight file at byte offset {offset}: {msg}")]
    WeightFile { offset: u64, msg: String },

    #[error("geometric mixture undefined: all products are zero")]
    ZeroProduct,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SfiError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SfiError::Io {
            path: path.into(),
            source,
        }
    }
}
