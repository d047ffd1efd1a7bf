use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain config: {0}")]
    InvalidConfig(String),

    #[error("process count {p} out of range: must satisfy 1 <= P <= {leaves} (leaf count)")]
    ProcessCount { p: usize, leaves: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("node {0} is a leaf; operation requires a non-leaf node")]
    LeafNode(usize),

    #[error("unknown tree node id {0}")]
    UnknownNode(usize),

    #[error("matrix too large to densify: N = {n} exceeds cap {cap}")]
    DensifyCap { n: usize, cap: usize },

    #[error("duplicate message (src={src}, dst={dst}, tag={tag}) within one round")]
    DuplicateMessage { src: usize, dst: usize, tag: String },

    #[error("undelivered messages at termination: {0}")]
    Deadlock(String),

    #[error("rank {rank} round {round}: schedule desynchronization: {detail}")]
    ScheduleMismatch {
        rank: usize,
        round: usize,
        detail: String,
    },

    #[error("missing baseline P0={p0} in run records")]
    MissingBaseline { p0: usize },

    #[error("fit design is rank-deficient: {0}; widen the (N, P) sweep")]
    FitDesign(String),

    #[error("empty store set")]
    EmptyStores,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
