pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod lm;
pub mod model;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod rewards;
pub mod seed;
pub mod tensor;
pub mod text;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
