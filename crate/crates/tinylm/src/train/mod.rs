//! Training loop: windowed next-token cross-entropy with gradient clipping,
//! the warmup + cosine schedule, and AdamW updates.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{
    adamw_step, clip_global_norm, lr_schedule, OptimizerState, TrainConfig, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPS,
};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One training-step record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub tokens_seen: u64,
    pub loss: f32,
}

/// Runs `cfg.total_steps` optimizer steps over `corpus`.
///
/// Each step samples contiguous windows of `max_seq_len + 1` tokens (inputs
/// plus shifted targets) until `cfg.batch_size` tokens are covered, averages
/// the window losses, backpropagates, clips, and applies AdamW at the
/// scheduled rate. Fully deterministic for a fixed seed; a non-finite loss
/// aborts with a divergence report.
pub fn train_loop(
    model: &mut Model,
    corpus: &[u32],
    cfg: &TrainConfig,
    opts: &ForwardOptions,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let window = model.config().max_seq_len;
    if corpus.len() < window + 1 {
        return Err(Error::Input(format!(
            "corpus has {} tokens; need at least max_seq_len + 1 = {}",
            corpus.len(),
            window + 1
        )));
    }
    let n_windows = (cfg.batch_size / window).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&model.weights);
    let mut history = Vec::with_capacity(cfg.total_steps);
    let mut tokens_seen = 0u64;

    model.weights.zero_grad();
    for step in 1..=cfg.total_steps {
        let mut loss_sum = 0.0f64;
        for _ in 0..n_windows {
            let start = rng.gen_range(0..=corpus.len() - (window + 1));
            let slice = &corpus[start..start + window + 1];
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let logits = bound.forward(&mut tape, &slice[..window], opts, None)?;
            let loss = tape.cross_entropy(logits, &slice[1..], u32::MAX)?;
            let loss_val = tape.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss became {loss_val}"),
                });
            }
            loss_sum += loss_val as f64;
            // Mean over windows: scale the loss so pulled grads accumulate
            // to the batch average.
            let scaled = tape.scale(loss, 1.0 / n_windows as f32)?;
            tape.backward(scaled)?;
            bound.pull_grads(&tape, &mut model.weights)?;
        }
        clip_global_norm(&mut model.weights, cfg.clip_norm)
            .map_err(|e| divergence_at(step, e))?;
        let lr = lr_schedule(step, cfg);
        adamw_step(&mut model.weights, &mut state, lr, cfg)?;
        model.weights.zero_grad();
        tokens_seen += (n_windows * window) as u64;
        history.push(LossRecord {
            step,
            tokens_seen,
            loss: (loss_sum / n_windows as f64) as f32,
        });
    }
    Ok(history)
}

fn divergence_at(step: usize, e: Error) -> Error {
    match e {
        Error::Diverged { detail, .. } => Error::Diverged { step, detail },
        other => other,
    }
}
