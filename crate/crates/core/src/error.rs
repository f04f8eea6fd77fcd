use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("max_pool2d needs even spatial extents, got {h}x{w}; pad the input before pooling")]
    OddPoolInput { h: usize, w: usize },

    #[error("pooling index {index} out of bounds for a {h}x{w} map")]
    PoolIndexOutOfBounds { index: usize, h: usize, w: usize },

    #[error("{h}x{w} feature map cannot be split into a {k}x{k} grid")]
    GridDivisibility { h: usize, w: usize, k: usize },

    #[error("input {h}x{w} is not a multiple of 8 in both extents; pad it first")]
    InputNotPadded { h: usize, w: usize },

    #[error("backward has already run on this tape")]
    BackwardTwice,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint {path}: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CrcMismatch {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("dataset {root}: {reason}")]
    Dataset { root: PathBuf, reason: String },

    #[error("unpaired files: {}", ids.join(", "))]
    Unpaired { ids: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
