//! Forward pass assembly: pre-norm blocks, rotary causal attention with an
//! optional key/value cache, SwiGLU feed-forward, and per-block activation
//! checkpointing.

use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::{AttentionMode, CheckpointPolicy, Tape, Tensor, TensorId};

/// How a forward pass runs; independent of the recorded math's result.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: AttentionMode,
    /// `Some` records each block as a checkpoint node instead of its full
    /// activation trace.
    pub checkpoint: Option<CheckpointPolicy>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { mode: AttentionMode::MemoryEfficient, checkpoint: None }
    }
}

/// Per-layer rotated keys and raw values for positions `0..len`, detached
/// from any tape. Every layer always holds the same number of positions.
pub struct AttentionCache {
    max_seq_len: usize,
    len: usize,
    layers: Vec<Option<(Tensor, Tensor)>>,
}

impl AttentionCache {
    pub fn new(config: &ModelConfig) -> Self {
        AttentionCache {
            max_seq_len: config.max_seq_len,
            len: 0,
            layers: (0..config.n_layers).map(|_| None).collect(),
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.len = 0;
        self.layers.iter_mut().for_each(|l| *l = None);
    }

    fn layer(&self, i: usize) -> Option<&(Tensor, Tensor)> {
        self.layers[i].as_ref()
    }

    fn store(&mut self, i: usize, k: Tensor, v: Tensor) {
        self.layers[i] = Some((k, v));
    }

    fn commit(&mut self, new_len: usize) {
        for entry in &self.layers {
            let (k, _) = entry.as_ref().expect("every layer stored this step");
            assert_eq!(k.shape()[0], new_len, "cache layers advance in lockstep");
        }
        self.len = new_len;
    }
}

/// Weight ids bound onto one tape, ready to run forward passes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BoundLayer {
    attn_norm: TensorId,
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
    wo: TensorId,
    ffn_norm: TensorId,
    w_gate: TensorId,
    w_up: TensorId,
    w_down: TensorId,
}

/// A model bound to a tape: holds the tape-resident ids of every parameter.
/// After `Tape::backward`, [`BoundModel::pull_grads`] moves the parameter
/// gradients back into the persistent [`ModelWeights`].
pub struct BoundModel {
    config: ModelConfig,
    tok_emb: TensorId,
    layers: Vec<BoundLayer>,
    final_norm: TensorId,
    output: TensorId,
}

/// Architecture configuration plus persistent weights.
pub struct Model {
    config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Model> {
        config.validate()?;
        if weights.num_params() != config.count_params() {
            return Err(Error::Config(format!(
                "weights hold {} parameters but the config needs {}",
                weights.num_params(),
                config.count_params()
            )));
        }
        Ok(Model { config, weights })
    }

    /// Fresh model with seeded random initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        let weights = ModelWeights::init(&config, seed)?;
        Model::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Copies every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let leaf = |tape: &mut Tape, t: &Tensor| tape.leaf(t, t.requires_grad());
        let tok_emb = leaf(tape, &self.weights.tok_emb)?;
        let mut layers = Vec::with_capacity(self.weights.layers.len());
        for l in &self.weights.layers {
            layers.push(BoundLayer {
                attn_norm: leaf(tape, &l.attn_norm)?,
                wq: leaf(tape, &l.wq)?,
                wk: leaf(tape, &l.wk)?,
                wv: leaf(tape, &l.wv)?,
                wo: leaf(tape, &l.wo)?,
                ffn_norm: leaf(tape, &l.ffn_norm)?,
                w_gate: leaf(tape, &l.w_gate)?,
                w_up: leaf(tape, &l.w_up)?,
                w_down: leaf(tape, &l.w_down)?,
            });
        }
        let final_norm = leaf(tape, &self.weights.final_norm)?;
        let output = leaf(tape, &self.weights.output)?;
        Ok(BoundModel { config: self.config, tok_emb, layers, final_norm, output })
    }

    /// One-shot forward: binds the weights and runs. For repeated passes on
    /// one tape, or to read gradients back, use [`Model::bind`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        ids: &[u32],
        opts: &ForwardOptions,
        cache: Option<&mut AttentionCache>,
    ) -> Result<TensorId> {
        self.bind(tape)?.forward(tape, ids, opts, cache)
    }
}

impl BoundModel {
    /// Runs the transformer over `ids`, returning `[seq, vocab]` logits on
    /// the tape. With a cache, `ids` extend the cached positions.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ids: &[u32],
        opts: &ForwardOptions,
        mut cache: Option<&mut AttentionCache>,
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let seq = ids.len();
        let offset = cache.as_deref().map_or(0, AttentionCache::len);
        if let Some(c) = cache.as_deref() {
            if c.layers.len() != cfg.n_layers {
                return Err(Error::Config(format!(
                    "cache built for {} layers, model has {}",
                    c.layers.len(),
                    cfg.n_layers
                )));
            }
            if offset + seq > c.max_seq_len.min(cfg.max_seq_len) {
                return Err(Error::CacheOverflow {
                    requested: offset + seq,
                    max: c.max_seq_len.min(cfg.max_seq_len),
                });
            }
            if opts.checkpoint.is_some() {
                return Err(Error::Config(
                    "checkpointing cannot be combined with an attention cache".into(),
                ));
            }
        } else if seq > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let positions: Vec<usize> = (offset..offset + seq).collect();

        let mut x = tape.embedding(self.tok_emb, ids)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match opts.checkpoint {
                Some(policy) => {
                    checkpointed_block(tape, x, layer, cfg, &positions, opts.mode, policy)?
                }
                None => {
                    let slot = cache.as_deref_mut().map(|c| (c, i));
                    block(tape, x, layer, cfg, &positions, opts.mode, slot)?
                }
            };
        }
        if let Some(c) = cache.as_deref_mut() {
            c.commit(offset + seq);
        }
        let x = tape.rmsnorm(x, self.final_norm, cfg.norm_eps)?;
        tape.matmul(x, self.output)
    }

    fn named_ids(&self) -> Vec<(String, TensorId)> {
        let mut out = vec![("tok_emb".to_string(), self.tok_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), l.attn_norm));
            out.push((format!("layers.{i}.wq"), l.wq));
            out.push((format!("layers.{i}.wk"), l.wk));
            out.push((format!("layers.{i}.wv"), l.wv));
            out.push((format!("layers.{i}.wo"), l.wo));
            out.push((format!("layers.{i}.ffn_norm"), l.ffn_norm));
            out.push((format!("layers.{i}.w_gate"), l.w_gate));
            out.push((format!("layers.{i}.w_up"), l.w_up));
            out.push((format!("layers.{i}.w_down"), l.w_down));
        }
        out.push(("final_norm".to_string(), self.final_norm));
        out.push(("output".to_string(), self.output));
        out
    }

    /// Accumulates the tape's parameter gradients into `weights`' grad
    /// slots. Call after `Tape::backward`; additive across calls.
    pub fn pull_grads(&self, tape: &Tape, weights: &mut ModelWeights) -> Result<()> {
        for ((name, id), (wname, tensor)) in self.named_ids().into_iter().zip(weights.named_mut())
        {
            debug_assert_eq!(name, wname, "bound ids walk in weight order");
            if let Some(g) = tape.grad(id) {
                let g = g.to_vec();
                tensor.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}

/// One pre-norm transformer block: x + attn(norm(x)), then x + ffn(norm(x)).
fn block(
    tape: &mut Tape,
    x: TensorId,
    lw: &BoundLayer,
    cfg: &ModelConfig,
    positions: &[usize],
    mode: AttentionMode,
    cache: Option<(&mut AttentionCache, usize)>,
) -> Result<TensorId> {
    let normed = tape.rmsnorm(x, lw.attn_norm, cfg.norm_eps)?;
    let attn = attn_sublayer(tape, normed, lw, cfg, positions, mode, cache)?;
    let x = tape.add(x, attn)?;
    let normed = tape.rmsnorm(x, lw.ffn_norm, cfg.norm_eps)?;
    let ffn = swiglu_ffn(tape, normed, lw.w_gate, lw.w_up, lw.w_down)?;
    tape.add(x, ffn)
}

fn attn_sublayer(
    tape: &mut Tape,
    x: TensorId,
    lw: &BoundLayer,
    cfg: &ModelConfig,
    positions: &[usize],
    mode: AttentionMode,
    cache: Option<(&mut AttentionCache, usize)>,
) -> Result<TensorId> {
    let (seq, heads, hd) = (positions.len(), cfg.n_heads, cfg.head_dim());
    let q = tape.matmul(x, lw.wq)?;
    let k = tape.matmul(x, lw.wk)?;
    let v = tape.matmul(x, lw.wv)?;
    let q = tape.reshape(q, vec![seq, heads, hd])?;
    let k = tape.reshape(k, vec![seq, heads, hd])?;
    let v = tape.reshape(v, vec![seq, heads, hd])?;
    let q = tape.rope(q, positions, cfg.rope_base)?;
    let k = tape.rope(k, positions, cfg.rope_base)?;

    let (k_full, v_full, q_offset) = match cache {
        Some((c, i)) => {
            let (k_full, v_full) = match c.layer(i) {
                Some((pk, pv)) => {
                    let pk = tape.constant(pk)?;
                    let pv = tape.constant(pv)?;
                    (tape.concat(&[pk, k], 0)?, tape.concat(&[pv, v], 0)?)
                }
                None => (k, v),
            };
            c.store(i, tape.detach(k_full), tape.detach(v_full));
            (k_full, v_full, positions[0])
        }
        None => (k, v, 0),
    };

    let out = tape.attention_causal(q, k_full, v_full, q_offset, mode)?;
    let out = tape.reshape(out, vec![seq, cfg.dim])?;
    tape.matmul(out, lw.wo)
}

/// y = (silu(x W_gate) ⊙ (x W_up)) W_down.
pub fn swiglu_ffn(
    tape: &mut Tape,
    x: TensorId,
    w_gate: TensorId,
    w_up: TensorId,
    w_down: TensorId,
) -> Result<TensorId> {
    let gate = tape.matmul(x, w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(x, w_up)?;
    let hidden = tape.mul(gate, up)?;
    tape.matmul(hidden, w_down)
}

fn checkpointed_block(
    tape: &mut Tape,
    x: TensorId,
    lw: &BoundLayer,
    cfg: &ModelConfig,
    positions: &[usize],
    mode: AttentionMode,
    policy: CheckpointPolicy,
) -> Result<TensorId> {
    let inputs = [
        x, lw.attn_norm, lw.wq, lw.wk, lw.wv, lw.wo, lw.ffn_norm, lw.w_gate, lw.w_up, lw.w_down,
    ];
    let cfg = *cfg;
    let positions = positions.to_vec();
    tape.checkpoint(&inputs, policy, move |t, ids| {
        let lw = BoundLayer {
            attn_norm: ids[1],
            wq: ids[2],
            wk: ids[3],
            wv: ids[4],
            wo: ids[5],
            ffn_norm: ids[6],
            w_gate: ids[7],
            w_up: ids[8],
            w_down: ids[9],
        };
        block(t, ids[0], &lw, &cfg, &positions, mode, None)
    })
}
