//! Parameter storage and initialization.

use super::ModelConfig;
use crate::error::Result;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One transformer block's parameters. Projections are stored `[in, out]` so
/// the forward pass multiplies without transposing.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// All model parameters, detached from any tape. Gradients accumulate in the
/// tensors' own grad slots between optimizer steps.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub tok_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub output: Tensor,
}

fn grad_tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    let mut t = Tensor::new(shape, data).expect("init shapes are consistent");
    t.set_requires_grad(true);
    t
}

impl ModelWeights {
    /// Samples projections from normal(0, 0.02); the residual-output
    /// projections (wo, w_down) are scaled down by 1/sqrt(2 * n_layers) and
    /// norm gains start at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02f32;
        let residual_std = std / (2.0 * config.n_layers as f32).sqrt();
        let normal = |rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32| {
            let dist = Normal::new(0.0f32, std).expect("positive std");
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
            grad_tensor(shape, data)
        };
        let ones = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            grad_tensor(shape, vec![1.0; n])
        };

        let (d, h, v) = (config.dim, config.ffn_hidden_dim(), config.vocab_size);
        let tok_emb = normal(&mut rng, vec![v, d], std);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: ones(vec![d]),
                wq: normal(&mut rng, vec![d, d], std),
                wk: normal(&mut rng, vec![d, d], std),
                wv: normal(&mut rng, vec![d, d], std),
                wo: normal(&mut rng, vec![d, d], residual_std),
                ffn_norm: ones(vec![d]),
                w_gate: normal(&mut rng, vec![d, h], std),
                w_up: normal(&mut rng, vec![d, h], std),
                w_down: normal(&mut rng, vec![h, d], residual_std),
            });
        }
        let final_norm = ones(vec![d]);
        let output = normal(&mut rng, vec![d, v], std);
        Ok(ModelWeights { tok_emb, layers, final_norm, output })
    }

    /// Canonical (name, tensor) walk; the order fixes the checkpoint layout.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.w_gate"), &l.w_gate));
            out.push((format!("layers.{i}.w_up"), &l.w_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("output".to_string(), &self.output));
        out
    }

    /// Mutable variant of [`ModelWeights::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("tok_emb".to_string(), &mut self.tok_emb)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layers.{i}.wq"), &mut l.wq));
            out.push((format!("layers.{i}.wk"), &mut l.wk));
            out.push((format!("layers.{i}.wv"), &mut l.wv));
            out.push((format!("layers.{i}.wo"), &mut l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &mut l.ffn_norm));
            out.push((format!("layers.{i}.w_gate"), &mut l.w_gate));
            out.push((format!("layers.{i}.w_up"), &mut l.w_up));
            out.push((format!("layers.{i}.w_down"), &mut l.w_down));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("output".to_string(), &mut self.output));
        out
    }

    /// Actual parameter count of the stored tensors.
    pub fn num_params(&self) -> u64 {
        self.named().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_mut() {
            t.zero_grad();
        }
    }
}
