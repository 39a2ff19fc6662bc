//! Layered run configuration. Values resolve as defaults < config file <
//! command-line flags; the file is JSON with one optional section per
//! concern, and every field inside a section is optional.

use std::path::Path;

use serde::Deserialize;
use tinylm::eval::EvalParams;
use tinylm::generate::SampleParams;
use tinylm::model::ModelConfig;
use tinylm::train::TrainConfig;

use crate::{usage, CliError};

/// Parsed `--config` file. Unknown sections are rejected so typos fail
/// loudly instead of silently falling back to defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: Option<ModelOverrides>,
    pub train: Option<TrainOverrides>,
    pub sample: Option<SampleParams>,
    pub eval: Option<EvalParams>,
    pub tokenizer: Option<TokenizerOverrides>,
}

impl FileConfig {
    /// Loads the file when a path was given; `None` means all defaults.
    pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = crate::read_input(path, "config file")?;
        serde_json::from_str(&text)
            .map_err(|e| usage(format!("config file {}: {e}", path.display())))
    }

    /// Model architecture after applying the file's `model` section.
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        if let Some(m) = &self.model {
            m.apply(&mut cfg);
        }
        cfg
    }

    /// Training hyperparameters after the file's `train` section. When the
    /// file leaves `warmup_steps` unset the caller is expected to derive it
    /// from the final step count; `explicit_warmup` reports that case.
    pub fn train_config(&self) -> (TrainConfig, bool) {
        let mut cfg = TrainConfig::default();
        let mut explicit_warmup = false;
        if let Some(t) = &self.train {
            t.apply(&mut cfg);
            explicit_warmup = t.warmup_steps.is_some();
        }
        (cfg, explicit_warmup)
    }

    pub fn sample_params(&self) -> SampleParams {
        self.sample.clone().unwrap_or_default()
    }

    pub fn eval_params(&self) -> EvalParams {
        self.eval.clone().unwrap_or_default()
    }

    pub fn tokenizer_vocab(&self) -> usize {
        self.tokenizer
            .as_ref()
            .and_then(|t| t.vocab_size)
            .unwrap_or(tinylm::tokenizer::DEFAULT_VOCAB_SIZE)
    }
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub dim: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub vocab_size: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub ffn_multiple: Option<usize>,
    pub rope_base: Option<f32>,
    pub norm_eps: Option<f32>,
}

impl ModelOverrides {
    fn apply(&self, cfg: &mut ModelConfig) {
        set(&mut cfg.dim, self.dim);
        set(&mut cfg.n_heads, self.n_heads);
        set(&mut cfg.n_layers, self.n_layers);
        set(&mut cfg.vocab_size, self.vocab_size);
        set(&mut cfg.max_seq_len, self.max_seq_len);
        set(&mut cfg.ffn_multiple, self.ffn_multiple);
        set(&mut cfg.rope_base, self.rope_base);
        set(&mut cfg.norm_eps, self.norm_eps);
    }
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOverrides {
    pub max_lr: Option<f64>,
    pub total_steps: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.max_lr, self.max_lr);
        set(&mut cfg.total_steps, self.total_steps);
        set(&mut cfg.warmup_steps, self.warmup_steps);
        set(&mut cfg.weight_decay, self.weight_decay);
        set(&mut cfg.clip_norm, self.clip_norm);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.seed, self.seed);
    }
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerOverrides {
    pub vocab_size: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Default warmup for a run whose config file does not pin one: the stock
/// 1:5 warmup-to-total ratio, capped at the stock 2000 steps, at least 1.
pub fn derived_warmup(total_steps: usize) -> usize {
    (total_steps / 5).clamp(1, 2_000)
}
