//! Desk-scale LLaMA-style language model stack: byte-fallback BPE tokenizer,
//! tape-based reverse-mode autodiff, a pre-norm rotary transformer, AdamW
//! training, sampling, likelihood-based evaluation, and a carbon-footprint
//! calculator. Everything runs on CPU in 32-bit floats and is deterministic
//! for a fixed seed.

pub mod error;
pub mod eval;
pub mod footprint;
pub mod generate;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
