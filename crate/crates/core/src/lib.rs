//! Masked generative story transformer: discrete image tokenization, masked
//! visual token modeling with story-level cross-attention, iterative parallel
//! decoding with character guidance, and a character-metric harness.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for common uses.

pub mod bpe;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod inference;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod training;
pub mod vq;

pub use scalar::{DType, Scalar};

pub type Tensor32 = numeric::Tensor<f32>;
pub type Tensor64 = numeric::Tensor<f64>;
pub type Graph32 = numeric::Graph<f32>;
pub type Graph64 = numeric::Graph<f64>;
pub type Model32 = model::MaskGst<f32>;
pub type Model64 = model::MaskGst<f64>;
pub type Tokenizer32 = vq::VqTokenizer<f32>;
pub type Classifier32 = eval::CharClassifier<f32>;
