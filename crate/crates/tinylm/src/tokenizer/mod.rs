//! Byte-fallback BPE tokenizer.
//!
//! The vocabulary always contains BOS, EOS, and all 256 byte tokens, so
//! encoding is total over arbitrary UTF-8: any symbol that is not covered by
//! the learned vocabulary decomposes into its UTF-8 bytes. Spaces are carried
//! as a U+2581 word-prefix marker; a literal U+2581 in input text is routed
//! through byte fallback so decoding stays exact.

mod io;
mod pretokenize;
mod train;

pub use pretokenize::{pretokenize, reconstruct, Pretoken};

use crate::error::{Error, Result};
use std::collections::HashMap;

/// Marker character standing for one space at the start of a pretoken.
pub const MARKER: char = '\u{2581}';

/// Default vocabulary size for desk-scale runs.
pub const DEFAULT_VOCAB_SIZE: usize = 4096;

pub(crate) const BOS_TOKEN: &str = "<s>";
pub(crate) const EOS_TOKEN: &str = "</s>";
/// Layout: ids 0 and 1 are BOS/EOS, 2..258 the byte tokens, then the learned
/// alphabet and merge outputs.
pub(crate) const BYTE_BASE: u32 = 2;
pub(crate) const FIRST_LEARNED: u32 = BYTE_BASE + 256;

pub(crate) fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

/// Working symbol during training and encoding. `Tok` symbols participate in
/// merges; `Byte` symbols are terminal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub(crate) enum Sym {
    Tok(String),
    Byte(u8),
}

/// Expands a pretoken into its initial symbols. The space prefix becomes the
/// marker symbol; literal U+2581 and embedded non-space whitespace become
/// byte symbols.
pub(crate) fn symbolize(p: &Pretoken) -> Vec<Sym> {
    let mut syms = Vec::new();
    if p.space_prefix {
        syms.push(Sym::Tok(MARKER.to_string()));
    }
    for c in p.text.chars() {
        if c == MARKER || c.is_whitespace() {
            let mut buf = [0u8; 4];
            for &b in c.encode_utf8(&mut buf).as_bytes() {
                syms.push(Sym::Byte(b));
            }
        } else {
            syms.push(Sym::Tok(c.to_string()));
        }
    }
    syms
}

/// Result of [`Tokenizer::decode`]. `lossy` is set when byte tokens did not
/// reassemble into valid UTF-8 and U+FFFD replacements were substituted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    pub lossy: bool,
}

/// A trained BPE model: dense vocabulary plus ordered merges.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    token_to_id: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), u32>,
    bos_id: u32,
    eos_id: u32,
}

impl Tokenizer {
    pub(crate) fn from_parts(
        vocab: Vec<String>,
        merges: Vec<(String, String)>,
        bos_id: u32,
        eos_id: u32,
    ) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(vocab.len());
        for (id, tok) in vocab.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::TokenizerTrain(format!(
                    "duplicate token {tok:?} in vocabulary"
                )));
            }
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, pair) in merges.iter().enumerate() {
            merge_ranks.insert(pair.clone(), rank as u32);
        }
        Ok(Tokenizer { vocab, token_to_id, merges, merge_ranks, bos_id, eos_id })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn bos_id(&self) -> u32 {
        self.bos_id
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Token string for `id`, if in range.
    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Encodes arbitrary UTF-8 text. Never fails: symbols outside the
    /// vocabulary fall back to their byte tokens.
    pub fn encode(&self, text: &str, add_bos: bool) -> Vec<u32> {
        let mut ids = Vec::new();
        if add_bos {
            ids.push(self.bos_id);
        }
        for pretoken in pretokenize(text) {
            let mut syms = symbolize(&pretoken);
            self.apply_merges(&mut syms);
            for sym in syms {
                self.push_sym(&mut ids, sym);
            }
        }
        ids
    }

    /// Repeatedly merges the lowest-rank adjacent pair (leftmost first),
    /// which reproduces sequential application of the merge list.
    fn apply_merges(&self, syms: &mut Vec<Sym>) {
        loop {
            let mut best: Option<(u32, usize)> = None;
            for i in 0..syms.len().saturating_sub(1) {
                if let (Sym::Tok(l), Sym::Tok(r)) = (&syms[i], &syms[i + 1]) {
                    if let Some(&rank) = self.merge_ranks.get(&(l.clone(), r.clone())) {
                        if best.map_or(true, |(b, _)| rank < b) {
                            best = Some((rank, i));
                        }
                    }
                }
            }
            let Some((_, i)) = best else { break };
            let (Sym::Tok(l), Sym::Tok(r)) = (&syms[i], &syms[i + 1]) else {
                unreachable!("best pair indexes token symbols");
            };
            let merged = Sym::Tok(format!("{l}{r}"));
            syms[i] = merged;
            syms.remove(i + 1);
        }
    }

    fn push_sym(&self, ids: &mut Vec<u32>, sym: Sym) {
        match sym {
            Sym::Byte(b) => ids.push(BYTE_BASE + b as u32),
            Sym::Tok(s) => {
                if let Some(&id) = self.token_to_id.get(&s) {
                    ids.push(id);
                } else {
                    // Residual symbol: decompose to bytes, the marker standing
                    // for the space it encodes.
                    let resolved: String =
                        s.chars().map(|c| if c == MARKER { ' ' } else { c }).collect();
                    for b in resolved.bytes() {
                        ids.push(BYTE_BASE + b as u32);
                    }
                }
            }
        }
    }

    /// Inverse of [`Tokenizer::encode`] up to BOS/EOS stripping.
    pub fn decode(&self, ids: &[u32]) -> Result<Decoded> {
        let mut text = String::new();
        let mut pending = Vec::new();
        let mut lossy = false;
        for &id in ids {
            if id as usize >= self.vocab.len() {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: id as usize,
                    bound: self.vocab.len(),
                });
            }
            if id == self.bos_id || id == self.eos_id {
                continue;
            }
            if (BYTE_BASE..FIRST_LEARNED).contains(&id) {
                pending.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush_bytes(&mut pending, &mut text, &mut lossy);
            for c in self.vocab[id as usize].chars() {
                text.push(if c == MARKER { ' ' } else { c });
            }
        }
        flush_bytes(&mut pending, &mut text, &mut lossy);
        Ok(Decoded { text, lossy })
    }
}

fn flush_bytes(pending: &mut Vec<u8>, text: &mut String, lossy: &mut bool) {
    if pending.is_empty() {
        return;
    }
    match std::str::from_utf8(pending) {
        Ok(s) => text.push_str(s),
        Err(_) => {
            text.push_str(&String::from_utf8_lossy(pending));
            *lossy = true;
        }
    }
    pending.clear();
}
