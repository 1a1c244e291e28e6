pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod tokenizer;

pub use error::{Error, Result};
