//! Lossless compressed memory attention (LoMA) at desk scale.

pub mod error;
pub mod eval;
pub mod generator;
pub mod model;
pub mod structuring;
pub mod training;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
