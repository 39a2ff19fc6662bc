//! Greedy BPE training over pretokenized word types.

use super::{byte_token, symbolize, Sym, Tokenizer, BOS_TOKEN, EOS_TOKEN};
use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};

/// Specials plus the 256 byte tokens; the smallest legal vocabulary.
const RESERVED: usize = 2 + 256;

fn digit_count(s: &str) -> usize {
    s.chars().filter(char::is_ascii_digit).count()
}

impl Tokenizer {
    /// Trains a BPE model: the alphabet of the pretokenized corpus plus
    /// highest-frequency pair merges until `target_vocab` is reached or no
    /// pair occurs twice. Ties break on the lexicographically smallest
    /// (left, right) pair, making training deterministic.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_vocab: usize) -> Result<Tokenizer> {
        if target_vocab < RESERVED {
            return Err(Error::TokenizerTrain(format!(
                "target_vocab must be at least {RESERVED} (specials + byte tokens), got {target_vocab}"
            )));
        }

        // Word types: distinct pretoken symbol sequences with occurrence counts.
        let mut types: HashMap<Vec<Sym>, u64> = HashMap::new();
        for doc in corpus {
            for pretoken in super::pretokenize(doc.as_ref()) {
                let syms = symbolize(&pretoken);
                if !syms.is_empty() {
                    *types.entry(syms).or_insert(0) += 1;
                }
            }
        }
        if types.is_empty() {
            return Err(Error::TokenizerTrain("corpus is empty".into()));
        }

        let mut alphabet: HashMap<String, u64> = HashMap::new();
        for (syms, &count) in &types {
            for sym in syms {
                if let Sym::Tok(s) = sym {
                    *alphabet.entry(s.clone()).or_insert(0) += count;
                }
            }
        }
        let mut alphabet: Vec<(String, u64)> = alphabet.into_iter().collect();
        alphabet.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut vocab: Vec<String> = Vec::with_capacity(target_vocab);
        vocab.push(BOS_TOKEN.to_string());
        vocab.push(EOS_TOKEN.to_string());
        for b in 0..=255u8 {
            vocab.push(byte_token(b));
        }
        let capacity = target_vocab - RESERVED;
        for (tok, _) in alphabet.into_iter().take(capacity) {
            vocab.push(tok);
        }
        // Symbols outside this set (a truncated alphabet, byte symbols) never
        // participate in merges.
        let mut known: HashSet<String> = vocab.iter().cloned().collect();

        let mut merges: Vec<(String, String)> = Vec::new();
        while vocab.len() < target_vocab {
            let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
            for (syms, &count) in &types {
                for pair in syms.windows(2) {
                    if let (Sym::Tok(l), Sym::Tok(r)) = (&pair[0], &pair[1]) {
                        *counts.entry((l.as_str(), r.as_str())).or_insert(0) += count;
                    }
                }
            }
            let mut best: Option<((&str, &str), u64)> = None;
            for (&pair, &count) in &counts {
                if !known.contains(pair.0) || !known.contains(pair.1) {
                    continue;
                }
                if digit_count(pair.0) + digit_count(pair.1) >= 2 {
                    continue;
                }
                let joined = format!("{}{}", pair.0, pair.1);
                if known.contains(&joined) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bp, bc)) => count > bc || (count == bc && pair < bp),
                };
                if better {
                    best = Some((pair, count));
                }
            }
            let Some(((left, right), count)) = best else { break };
            if count < 2 {
                break;
            }
            let (left, right) = (left.to_string(), right.to_string());
            let joined = format!("{left}{right}");

            let mut next: HashMap<Vec<Sym>, u64> = HashMap::with_capacity(types.len());
            for (syms, count) in types {
                let merged = apply_merge(syms, &left, &right, &joined);
                *next.entry(merged).or_insert(0) += count;
            }
            types = next;

            vocab.push(joined.clone());
            known.insert(joined);
            merges.push((left, right));
        }

        Tokenizer::from_parts(vocab, merges, 0, 1)
    }
}

/// Left-to-right single-merge application; overlapping occurrences resolve
/// leftmost-first ("aaa" becomes "aa" + "a").
fn apply_merge(syms: Vec<Sym>, left: &str, right: &str, joined: &str) -> Vec<Sym> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        let hit = i + 1 < syms.len()
            && matches!((&syms[i], &syms[i + 1]),
                (Sym::Tok(l), Sym::Tok(r)) if l == left && r == right);
        if hit {
            out.push(Sym::Tok(joined.to_string()));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}
