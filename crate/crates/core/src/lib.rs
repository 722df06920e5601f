//! Context optimization for prompt-based classifiers on top of a frozen text encoder.

pub mod archive;
pub mod classifier;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod interpret;
pub mod probe;
pub mod prompt;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod words;

pub use error::{Error, Result};
pub use tape::{Gradients, Real, Tape, Var};
pub use tensor::Tensor;
