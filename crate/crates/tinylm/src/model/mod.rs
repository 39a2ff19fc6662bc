//! Transformer architecture: token embedding, pre-normalized blocks with
//! rotary causal attention and a SwiGLU feed-forward, final RMSNorm, and an
//! untied output projection.

mod forward;
mod weights;

pub use forward::{swiglu_ffn, AttentionCache, BoundModel, ForwardOptions, Model};
pub use weights::ModelWeights;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. `ffn_multiple` rounds the feed-forward
/// hidden width; `rope_base` is the rotary frequency base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ffn_multiple: usize,
    pub rope_base: f32,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; train in seconds on a CPU.
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            n_heads: 4,
            n_layers: 2,
            vocab_size: 4096,
            max_seq_len: 256,
            ffn_multiple: 256,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("ffn_multiple", self.ffn_multiple),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::Config("rope_base and norm_eps must be positive".into()));
        }
        if self.dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if (self.dim / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.dim / self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Feed-forward hidden width: floor(2/3 * 4 * dim) rounded up to
    /// `ffn_multiple`.
    pub fn ffn_hidden_dim(&self) -> usize {
        let base = 8 * self.dim / 3;
        base.div_ceil(self.ffn_multiple) * self.ffn_multiple
    }

    /// Exact parameter total: embedding + per-block attention, FFN, and norm
    /// gains + final norm + untied output projection.
    pub fn count_params(&self) -> u64 {
        let d = self.dim as u64;
        let v = self.vocab_size as u64;
        let h = self.ffn_hidden_dim() as u64;
        let per_layer = 4 * d * d + 3 * d * h + 2 * d;
        v * d + self.n_layers as u64 * per_layer + d + d * v
    }

    /// The four published model sizes. Architecture fields only; vocabulary
    /// 32,000 and context 2048 are conventional for this family.
    pub fn preset(name: &str) -> Option<ModelConfig> {
        let (dim, n_heads, n_layers) = match name {
            "7B" => (4096, 32, 32),
            "13B" => (5120, 40, 40),
            "33B" => (6656, 52, 60),
            "65B" => (8192, 64, 80),
            _ => return None,
        };
        Some(ModelConfig {
            dim,
            n_heads,
            n_layers,
            vocab_size: 32000,
            max_seq_len: 2048,
            ffn_multiple: 256,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        })
    }
}
