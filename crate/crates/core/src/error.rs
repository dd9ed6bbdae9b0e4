use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: extents must be positive and rank at least one")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{extent} is not divisible by downsample ratio {ratio}")]
    NotDivisible { extent: usize, ratio: usize },
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("insertion layer {layer} outside 1..={num_layers}")]
    InsertionLayer { layer: usize, num_layers: usize },
    #[error("kv cache holds {cached} positions but {expected} were expected")]
    CacheMismatch { cached: usize, expected: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}
