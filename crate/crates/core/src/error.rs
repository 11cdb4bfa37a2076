use alloc::string::String;

use crate::pool::InstanceState;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("k = {k} exceeds the number of distinct vectors ({distinct})")]
    TooManyClusters { k: usize, distinct: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("requested {requested} instances but only {available} are available")]
    InsufficientInstances { requested: usize, available: usize },
    #[error("instance {0} has no cluster assignment")]
    Unassigned(String),
    #[error("adhere index {index} out of range for {arity} logits")]
    AdhereIndex { index: usize, arity: usize },
    #[error("illegal transition for {id}: {from} -> {to}")]
    IllegalTransition {
        id: String,
        from: InstanceState,
        to: InstanceState,
    },
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("invalid instance {id}: {reason}")]
    InvalidInstance { id: String, reason: String },
    #[error("invalid labeled pair for {id}: {reason}")]
    InvalidPair { id: String, reason: String },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("empty input")]
    EmptyInput,
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("invalid pool spec: {0}")]
    InvalidSpec(String),
}
