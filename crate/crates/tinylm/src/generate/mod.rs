//! Decoding: greedy and temperature sampling driven by the incremental
//! attention cache, with stop conditions and transcript records.

mod metrics;

pub use metrics::{majority_vote, pass_at_k, MAJORITY_K_GSM8K, MAJORITY_K_MATH};

use crate::error::{Error, Result};
use crate::model::{AttentionCache, ForwardOptions, Model};
use crate::tensor::Tape;
use crate::tokenizer::Tokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How the next token is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Argmax over the logits; the lowest id wins exact ties.
    Greedy,
    /// Softmax over logits divided by the temperature, sampled with the
    /// seeded generator.
    Temperature,
}

/// Decoding controls. Stop conditions come in two forms: token ids, which
/// end a generation without being kept, and strings, which cut the decoded
/// completion just before their first occurrence. The tokenizer's EOS
/// always acts as a stop token in [`generate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleParams {
    pub mode: SampleMode,
    pub temperature: f32,
    pub max_new_tokens: usize,
    pub stop_tokens: Vec<u32>,
    pub stop_strings: Vec<String>,
    pub seed: u64,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams {
            mode: SampleMode::Greedy,
            temperature: 1.0,
            max_new_tokens: 128,
            stop_tokens: Vec::new(),
            stop_strings: Vec::new(),
            seed: 0,
        }
    }
}

impl SampleParams {
    pub fn validate(&self) -> Result<()> {
        if self.mode == SampleMode::Temperature
            && !(self.temperature.is_finite() && self.temperature > 0.0)
        {
            return Err(Error::Config(format!(
                "temperature must be a positive finite number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Why decoding ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// EOS or a listed stop token was sampled; it is not kept.
    StopToken,
    /// A stop string appeared in the decoded completion.
    StopString,
    /// `max_new_tokens` were produced.
    Budget,
    /// Prompt plus completion filled the model's context window.
    ContextFull,
}

/// One finished generation.
#[derive(Debug, Clone)]
pub struct Generation {
    pub prompt: String,
    pub completion: String,
    /// Sampled ids. On a stop-string hit these may run past `completion` by
    /// the tokens that finished the match.
    pub ids: Vec<u32>,
    pub stop: StopReason,
    /// Decoding met byte-fallback sequences that were not valid UTF-8.
    pub lossy: bool,
}

#[derive(Serialize)]
struct Transcript<'a> {
    prompt: &'a str,
    completion: &'a str,
    token_count: usize,
    seed: u64,
    params: &'a SampleParams,
}

/// One line-delimited JSON transcript record for a finished generation.
pub fn transcript_line(g: &Generation, params: &SampleParams) -> String {
    serde_json::to_string(&Transcript {
        prompt: &g.prompt,
        completion: &g.completion,
        token_count: g.ids.len(),
        seed: params.seed,
        params,
    })
    .expect("transcript record serializes")
}

/// Encodes `prompt`, samples until EOS, a stop condition, the token budget,
/// or a full context window, and decodes the completion.
pub fn generate(
    model: &Model,
    tokenizer: &Tokenizer,
    prompt: &str,
    params: &SampleParams,
) -> Result<Generation> {
    if model.config().vocab_size != tokenizer.vocab_size() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            model.config().vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let prompt_ids = tokenizer.encode(prompt, true);
    let mut stop_ids = params.stop_tokens.clone();
    stop_ids.push(tokenizer.eos_id());
    let probe = (!params.stop_strings.is_empty()).then_some(tokenizer);
    let out = decode_loop(model, &prompt_ids, &stop_ids, params, probe)?;
    let decoded = tokenizer.decode(&out.ids)?;
    let completion = match out.cut {
        Some(at) => decoded.text[..at].to_string(),
        None => decoded.text,
    };
    Ok(Generation {
        prompt: prompt.to_string(),
        completion,
        ids: out.ids,
        stop: out.stop,
        lossy: decoded.lossy,
    })
}

/// Decodes from raw prompt ids, stopping on any id in `stop_ids`. String
/// stop conditions need a tokenizer; use [`generate`] for those.
pub fn generate_ids(
    model: &Model,
    prompt_ids: &[u32],
    stop_ids: &[u32],
    params: &SampleParams,
) -> Result<(Vec<u32>, StopReason)> {
    let out = decode_loop(model, prompt_ids, stop_ids, params, None)?;
    Ok((out.ids, out.stop))
}

struct Outcome {
    ids: Vec<u32>,
    stop: StopReason,
    /// Byte offset of the first stop-string match in the decoded completion.
    cut: Option<usize>,
}

fn decode_loop(
    model: &Model,
    prompt_ids: &[u32],
    stop_ids: &[u32],
    params: &SampleParams,
    probe: Option<&Tokenizer>,
) -> Result<Outcome> {
    params.validate()?;
    let max_ctx = model.config().max_seq_len;
    if prompt_ids.is_empty() {
        return Err(Error::Input("prompt must encode to at least one token".into()));
    }
    if prompt_ids.len() >= max_ctx {
        return Err(Error::Input(format!(
            "prompt holds {} tokens; it must stay below max_seq_len {max_ctx} to leave room to generate",
            prompt_ids.len()
        )));
    }
    let mut ids = Vec::new();
    let mut cut = None;
    if params.max_new_tokens == 0 {
        return Ok(Outcome { ids, stop: StopReason::Budget, cut });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut decoder = Decoder::new(model);
    let mut row = decoder.feed(prompt_ids)?;
    let stop = loop {
        let next = sample_token(&row, params, &mut rng);
        if stop_ids.contains(&next) {
            break StopReason::StopToken;
        }
        ids.push(next);
        if let Some(tok) = probe {
            if let Some(at) = earliest_stop(&tok.decode(&ids)?.text, &params.stop_strings) {
                cut = Some(at);
                break StopReason::StopString;
            }
        }
        if ids.len() == params.max_new_tokens {
            break StopReason::Budget;
        }
        // Feeding would fill the window, leaving nowhere to put another token.
        if decoder.cache.len() + 1 >= max_ctx {
            break StopReason::ContextFull;
        }
        row = decoder.feed(&[next])?;
    };
    Ok(Outcome { ids, stop, cut })
}

/// Streams tokens through the model one forward call at a time, carrying
/// the attention cache between calls.
struct Decoder<'m> {
    model: &'m Model,
    opts: ForwardOptions,
    cache: AttentionCache,
}

impl<'m> Decoder<'m> {
    fn new(model: &'m Model) -> Decoder<'m> {
        Decoder {
            model,
            opts: ForwardOptions::default(),
            cache: AttentionCache::new(model.config()),
        }
    }

    /// Feeds `ids` and returns the logits row of the last fed position.
    fn feed(&mut self, ids: &[u32]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, ids, &self.opts, Some(&mut self.cache))?;
        let data = tape.data(out);
        Ok(data[data.len() - self.model.config().vocab_size..].to_vec())
    }
}

/// Lowest index among the maxima.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn sample_token(row: &[f32], params: &SampleParams, rng: &mut ChaCha8Rng) -> u32 {
    match params.mode {
        SampleMode::Greedy => argmax(row) as u32,
        SampleMode::Temperature => {
            // softmax(row / T) in f64, stabilized against the max logit.
            let t = f64::from(params.temperature);
            let top = f64::from(row[argmax(row)]);
            let weights: Vec<f64> =
                row.iter().map(|&x| ((f64::from(x) - top) / t).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                u -= w;
                if u < 0.0 {
                    return i as u32;
                }
            }
            // Rounding pushed u past the last bucket.
            (row.len() - 1) as u32
        }
    }
}

/// Byte offset of the earliest stop-string match, if any.
fn earliest_stop(text: &str, stops: &[String]) -> Option<usize> {
    stops.iter().filter_map(|s| text.find(s.as_str())).min()
}
