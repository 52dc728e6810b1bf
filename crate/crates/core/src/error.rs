use alloc::string::String;
use alloc::vec::Vec;

/// Errors surfaced by kernels, models, samplers and data generation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{channels} channels are not divisible into {groups} groups")]
    Groups { channels: usize, groups: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown garment category {0:?}")]
    UnknownCategory(String),

    #[error("duplicate garment category {0}")]
    DuplicateCategory(&'static str),

    #[error("too many garments: {got} (at most {max})")]
    TooManyGarments { got: usize, max: usize },

    #[error("geometry mismatch: expected {expected:?}, got {got:?}")]
    Geometry { expected: Vec<usize>, got: Vec<usize> },

    #[error("reference features missing for attention layer {0}")]
    MissingLayer(usize),

    #[error("reference features were produced under fusion mode {cached}, model runs {current}")]
    FusionModeMismatch {
        cached: &'static str,
        current: &'static str,
    },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("dataset does not match stage {stage}: {reason}")]
    StageMismatch { stage: &'static str, reason: String },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("reports are not paired: {0}")]
    Pairing(String),
}

pub type Result<T> = core::result::Result<T, Error>;
