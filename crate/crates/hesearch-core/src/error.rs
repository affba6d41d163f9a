//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input length {len} exceeds the {num_slots} available slots")]
    Capacity { len: usize, num_slots: usize },

    #[error("missing rotation key for offset {offset}")]
    MissingRotationKey { offset: i64 },

    #[error("multiplicative depth exhausted (level 0)")]
    DepthExhausted,

    #[error("nothing to rescale: no multiplication is pending")]
    NothingToRescale,

    #[error("operand has a pending rescale; rescale before multiplying")]
    PendingRescale,

    #[error("ciphertext levels differ ({a} vs {b}); match levels first")]
    LevelMismatch { a: u32, b: u32 },

    #[error("ciphertext degrees differ; relinearize first")]
    DegreeMismatch,

    #[error("operation requires a degree-1 ciphertext; relinearize first")]
    NeedsRelinearize,

    #[error("span {span} is not a power of two within the slot count")]
    BadSpan { span: usize },

    #[error("invalid simulation parameters: {0}")]
    Params(String),

    #[error("cannot normalize the all-zero vector")]
    ZeroVector,

    #[error("matrix is not square with the expected dimension")]
    Shape,

    #[error("replicated packing requires an even number of blocks per ciphertext (got {m})")]
    OddBlockCount { m: usize },

    #[error("database layout {found} does not match the layout {expected} required by this engine")]
    WrongLayout { expected: String, found: String },

    #[error("database diagonals are not pre-rotated; the giant-step rotation would corrupt them")]
    UnrotatedDatabase,

    #[error("rotation amount {s} out of range [0, {n})")]
    RotationOutOfRange { s: i64, n: usize },

    #[error("unsupported comparison depth {kappa}; supported depths are 7..=10")]
    UnsupportedDepth { kappa: u32 },

    #[error("comparison threshold {delta} outside the open interval (-1, 1)")]
    ThresholdRange { delta: f64 },

    #[error("cannot aggregate an empty set of embeddings")]
    EmptyAggregate,

    #[error("identity {db_index} matched only in the {block} aggregate block; cannot assign an embedding")]
    AmbiguousMatch { db_index: usize, block: &'static str },

    #[error("missing diagonal ciphertext (group {group}, diagonal {k})")]
    MissingDiagonal { group: usize, k: usize },

    #[error("database format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
