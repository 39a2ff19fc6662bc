//! Optimization recipe: warmup + cosine learning-rate schedule, global-norm
//! gradient clipping, and AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::ModelWeights;
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

/// Training hyperparameters. `batch_size` counts tokens per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 3.0e-4,
            total_steps: 10_000,
            warmup_steps: 2_000,
            weight_decay: 0.1,
            clip_norm: 1.0,
            // Desk-scale default; the published models use 4M-token batches.
            batch_size: 8_192,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.max_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("max_lr and clip_norm must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear 0 to `max_lr` over the warmup, then cosine
/// decay to 10% of `max_lr` at `total_steps`. Steps past the end clamp to the
/// final value.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step <= cfg.warmup_steps {
        // step == warmup hits max_lr exactly (ratio is 1.0).
        if cfg.warmup_steps == 0 {
            return cfg.max_lr;
        }
        return cfg.max_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    let p = (step - cfg.warmup_steps) as f64 / span as f64;
    let lr_min = 0.1 * cfg.max_lr;
    lr_min + 0.5 * (cfg.max_lr - lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Scales every gradient so the global L2 norm does not exceed `clip`;
/// returns the factor applied (1.0 when already within bounds).
pub fn clip_global_norm(weights: &mut ModelWeights, clip: f64) -> Result<f64> {
    let mut sum_sq = 0.0f64;
    for (name, t) in weights.named() {
        if let Some(g) = t.grad() {
            for &v in g {
                if !v.is_finite() {
                    return Err(Error::Diverged {
                        step: 0,
                        detail: format!("non-finite gradient in {name}"),
                    });
                }
                sum_sq += (v as f64) * (v as f64);
            }
        }
    }
    let norm = sum_sq.sqrt();
    if norm <= clip {
        return Ok(1.0);
    }
    let factor = clip / norm;
    for (_, t) in weights.named_mut() {
        if let Some(g) = t.grad_slot().as_mut() {
            for v in g.iter_mut() {
                *v *= factor as f32;
            }
        }
    }
    Ok(factor)
}

/// First and second moment estimates, parallel to the canonical parameter
/// walk of [`ModelWeights::named`].
pub struct OptimizerState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl OptimizerState {
    pub fn new(weights: &ModelWeights) -> Self {
        let m = weights.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = weights.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptimizerState { m, v, t: 0 }
    }

    pub fn step(&self) -> u64 {
        self.t
    }
}

/// The elementwise AdamW rule at step `t` (1-based).
#[allow(clippy::too_many_arguments)]
fn adamw_update(
    theta: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    let (lr, wd, eps) = (lr as f32, weight_decay as f32, ADAM_EPS as f32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps) + lr * wd * theta[i];
    }
}

/// One optimizer step over every parameter. Decay applies to rank >= 2
/// tensors only (projections and embeddings), never to norm gains. Missing
/// gradients are treated as zero.
pub fn adamw_step(
    weights: &mut ModelWeights,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    for (idx, (_, tensor)) in weights.named_mut().into_iter().enumerate() {
        let wd = if tensor.shape().len() >= 2 { cfg.weight_decay } else { 0.0 };
        let n = tensor.numel();
        let grad = match tensor.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        adamw_update(
            tensor.data_mut(),
            &grad,
            &mut state.m[idx],
            &mut state.v[idx],
            t,
            lr,
            wd,
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(max_lr: f64, total: usize, warmup: usize) -> TrainConfig {
        TrainConfig { max_lr, total_steps: total, warmup_steps: warmup, ..Default::default() }
    }

    fn tiny_weights() -> ModelWeights {
        let c = ModelConfig {
            dim: 8,
            n_heads: 2,
            n_layers: 1,
            vocab_size: 7,
            max_seq_len: 8,
            ffn_multiple: 4,
            ..ModelConfig::default()
        };
        ModelWeights::init(&c, 0).unwrap()
    }

    #[test]
    fn schedule_hits_max_at_warmup_end() {
        let c = cfg(3.0e-4, 1000, 100);
        assert_eq!(lr_schedule(100, &c), 3.0e-4);
        assert!(lr_schedule(99, &c) < 3.0e-4);
    }

    #[test]
    fn schedule_ends_at_ten_percent_exactly() {
        let c = cfg(3.0e-4, 1000, 100);
        assert_eq!(lr_schedule(1000, &c), 0.1 * 3.0e-4);
        // Past-the-end steps clamp to the final value.
        assert_eq!(lr_schedule(5000, &c), 0.1 * 3.0e-4);
    }

    #[test]
    fn schedule_midpoint_value() {
        let c = cfg(1.0, 1000, 0);
        let got = lr_schedule(500, &c);
        assert!((got - 0.55).abs() < 1e-12, "{got}");
    }

    #[test]
    fn schedule_is_continuous_and_monotone_after_warmup() {
        let c = cfg(1.0, 400, 50);
        let jump = (lr_schedule(50, &c) - lr_schedule(49, &c)).abs();
        assert!(jump <= 1.0 / 50.0 + 1e-12, "continuous at the boundary");
        let mut prev = lr_schedule(50, &c);
        for step in 51..=400 {
            let lr = lr_schedule(step, &c);
            assert!(lr <= prev + 1e-15, "step {step}: {lr} > {prev}");
            prev = lr;
        }
    }

    #[test]
    fn warmup_longer_than_total_is_invalid() {
        assert!(cfg(1.0, 100, 200).validate().is_err());
        assert!(cfg(1.0, 100, 100).validate().is_ok());
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut w = tiny_weights();
        w.zero_grad();
        let mut g = vec![0.0; w.final_norm.numel()];
        g[0] = 0.3;
        g[1] = 0.4;
        w.final_norm.accumulate_grad(&g).unwrap();
        let factor = clip_global_norm(&mut w, 1.0).unwrap();
        assert_eq!(factor, 1.0);
        assert_eq!(&w.final_norm.grad().unwrap()[..2], &[0.3, 0.4]);
    }

    #[test]
    fn clip_scales_to_the_bound() {
        let mut w = tiny_weights();
        w.zero_grad();
        let mut g = vec![0.0; w.final_norm.numel()];
        g[0] = 3.0;
        g[1] = 4.0;
        w.final_norm.accumulate_grad(&g).unwrap();
        let factor = clip_global_norm(&mut w, 1.0).unwrap();
        assert!((factor - 0.2).abs() < 1e-8);
        let clipped = w.final_norm.grad().unwrap();
        assert!((clipped[0] - 0.6).abs() < 1e-6);
        assert!((clipped[1] - 0.8).abs() < 1e-6);
        let norm: f32 = clipped.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "post-clip norm {norm}");
    }

    #[test]
    fn clip_rejects_nan() {
        let mut w = tiny_weights();
        w.zero_grad();
        let mut g = vec![0.0; w.final_norm.numel()];
        g[0] = f32::NAN;
        w.final_norm.accumulate_grad(&g).unwrap();
        assert!(matches!(
            clip_global_norm(&mut w, 1.0),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn adamw_scalar_hand_value() {
        let mut theta = [1.0f32];
        let mut m = [0.0f32];
        let mut v = [0.0f32];
        adamw_update(&mut theta, &[1.0], &mut m, &mut v, 1, 0.1, 0.1);
        assert!((theta[0] - 0.89).abs() < 1e-4, "{}", theta[0]);
    }

    #[test]
    fn adamw_zero_grad_is_pure_decay() {
        let mut w = tiny_weights();
        let before = w.tok_emb.data().to_vec();
        let mut state = OptimizerState::new(&w);
        let cfg = TrainConfig { weight_decay: 0.1, ..Default::default() };
        w.zero_grad();
        adamw_step(&mut w, &mut state, 0.01, &cfg).unwrap();
        for (a, b) in w.tok_emb.data().iter().zip(&before) {
            let want = b * (1.0 - 0.01 * 0.1);
            assert!((a - want).abs() < 1e-7, "{a} vs {want}");
        }
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn norm_gains_are_never_decayed() {
        let mut w = tiny_weights();
        let before = w.final_norm.data().to_vec();
        let mut state = OptimizerState::new(&w);
        let cfg = TrainConfig { weight_decay: 0.5, ..Default::default() };
        w.zero_grad();
        adamw_step(&mut w, &mut state, 0.1, &cfg).unwrap();
        assert_eq!(w.final_norm.data(), before.as_slice());
    }

    #[test]
    fn wd_zero_matches_plain_adam() {
        // Plain Adam reference on the same scalar stream.
        let grads = [0.5f32, -0.25, 0.125, 1.0];
        let mut theta = [0.7f32];
        let mut m = [0.0f32];
        let mut v = [0.0f32];
        for (i, &g) in grads.iter().enumerate() {
            adamw_update(&mut theta, &[g], &mut m, &mut v, i as u64 + 1, 0.05, 0.0);
        }
        let mut rm = 0.0f64;
        let mut rv = 0.0f64;
        let mut rt = 0.7f64;
        for (i, &g) in grads.iter().enumerate() {
            let g = g as f64;
            rm = 0.9 * rm + 0.1 * g;
            rv = 0.95 * rv + 0.05 * g * g;
            let mh = rm / (1.0 - 0.9f64.powi(i as i32 + 1));
            let vh = rv / (1.0 - 0.95f64.powi(i as i32 + 1));
            rt -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((theta[0] as f64 - rt).abs() < 1e-5, "{} vs {rt}", theta[0]);
    }
}
