//! Dense row-major tensors, a reverse-mode tape over them, parameters and Adam.

mod graph;
pub mod gradcheck;
mod params;
mod tensor;

pub use graph::{softmax_in_place, AttnSource, Graph, Var};
pub use params::{AdamConfig, ParamId, ParameterStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("parameter `{name}` has no gradient")]
    MissingGradient { name: String },
    #[error("parameter `{name}` already exists")]
    DuplicateParameter { name: String },
    #[error("unknown parameter `{name}`")]
    UnknownParameter { name: String },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, NumericError>;
