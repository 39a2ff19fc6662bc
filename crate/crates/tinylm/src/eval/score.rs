//! Multiple-choice scoring: completion log-likelihood under the model,
//! with character or answer-conditional normalization.

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::Tape;
use crate::tokenizer::Tokenizer;
use serde::{Deserialize, Serialize};

/// How a (context, completion) pair is turned into token positions to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    /// Encode context and completion as one string; the completion's tokens
    /// are those past the longest shared prefix with the context encoding.
    /// Merges may cross the boundary, matching how the text would tokenize
    /// in the wild.
    Joint,
    /// Encode the completion on its own and append it to the context ids.
    Independent,
}

impl Default for EncodingMode {
    fn default() -> Self {
        EncodingMode::Joint
    }
}

/// Sum of log P(token) over the completion's tokens given the context.
pub fn completion_logprob(
    model: &Model,
    tokenizer: &Tokenizer,
    context: &str,
    completion: &str,
    mode: EncodingMode,
) -> Result<f64> {
    if completion.is_empty() {
        return Err(Error::Domain("cannot score an empty completion".into()));
    }
    if model.config().vocab_size != tokenizer.vocab_size() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            model.config().vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let (ids, from) = encode_pair(tokenizer, context, completion, mode)?;
    // Rows 0..len-2 predict tokens 1..len-1; the last token needs no row.
    let mut tape = Tape::new();
    let logits =
        model.forward(&mut tape, &ids[..ids.len() - 1], &ForwardOptions::default(), None)?;
    let v = model.config().vocab_size;
    let data = tape.data(logits);
    let mut total = 0.0f64;
    for p in from..ids.len() {
        total += row_logprob(&data[(p - 1) * v..p * v], ids[p]);
    }
    Ok(total)
}

/// Completion log-likelihood divided by the completion's character count.
pub fn score_choice_char_norm(
    model: &Model,
    tokenizer: &Tokenizer,
    context: &str,
    completion: &str,
    mode: EncodingMode,
) -> Result<f64> {
    let lp = completion_logprob(model, tokenizer, context, completion, mode)?;
    Ok(lp / completion.chars().count() as f64)
}

/// log P(completion | context) - log P(completion | "Answer:").
pub fn score_choice_answer_norm(
    model: &Model,
    tokenizer: &Tokenizer,
    context: &str,
    completion: &str,
    mode: EncodingMode,
) -> Result<f64> {
    let lp = completion_logprob(model, tokenizer, context, completion, mode)?;
    let base = completion_logprob(model, tokenizer, "Answer:", completion, mode)?;
    Ok(lp - base)
}

/// Index of the highest score; the lowest index wins exact ties. An empty
/// slice gives 0.
pub fn select_choice(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn encode_pair(
    tokenizer: &Tokenizer,
    context: &str,
    completion: &str,
    mode: EncodingMode,
) -> Result<(Vec<u32>, usize)> {
    let (ids, from) = match mode {
        EncodingMode::Joint => {
            let ctx = tokenizer.encode(context, true);
            let full = tokenizer.encode(&format!("{context}{completion}"), true);
            let from = common_prefix_len(&ctx, &full);
            (full, from)
        }
        EncodingMode::Independent => {
            let mut ids = tokenizer.encode(context, true);
            let from = ids.len();
            ids.extend(tokenizer.encode(completion, false));
            (ids, from)
        }
    };
    // A non-empty completion always extends the encoding, but guard anyway.
    if from >= ids.len() {
        return Err(Error::Domain(
            "completion adds no tokens to the context encoding".into(),
        ));
    }
    Ok((ids, from))
}

fn common_prefix_len(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// log softmax(row)[target], accumulated at 64-bit.
fn row_logprob(row: &[f32], target: u32) -> f64 {
    let m = f64::from(row.iter().cloned().fold(f32::NEG_INFINITY, f32::max));
    let lse = m + row.iter().map(|&x| (f64::from(x) - m).exp()).sum::<f64>().ln();
    f64::from(row[target as usize]) - lse
}
