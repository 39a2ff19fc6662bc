//! Tokenizer file format: a single UTF-8 text document with LF line endings.
//!
//! ```text
//! version<TAB>1
//! vocab_size<TAB>V
//! bos_id<TAB>0
//! eos_id<TAB>1
//! [vocab]
//! <id><TAB><escaped token>
//! [merges]
//! <rank><TAB><escaped left><TAB><escaped right>
//! ```
//!
//! Token fields escape backslash, tab, newline, and carriage return as
//! `\\`, `\t`, `\n`, `\r`; other control characters as `\xHH`. Saving a
//! loaded model reproduces the file bit for bit.

use super::{byte_token, Tokenizer, BYTE_BASE, FIRST_LEARNED};
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

fn escape(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c if (c as u32) < 0x20 || c as u32 == 0x7F => {
                let _ = write!(out, "\\x{:02X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

fn unescape(field: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('x') => {
                let hi = chars.next();
                let lo = chars.next();
                let (Some(hi), Some(lo)) = (hi, lo) else {
                    return Err(Error::TokenizerFile {
                        line,
                        detail: "truncated \\xHH escape".into(),
                    });
                };
                let byte = u8::from_str_radix(&format!("{hi}{lo}"), 16).map_err(|_| {
                    Error::TokenizerFile { line, detail: format!("bad \\x escape \\x{hi}{lo}") }
                })?;
                out.push(byte as char);
            }
            other => {
                return Err(Error::TokenizerFile {
                    line,
                    detail: format!("unknown escape {other:?}"),
                })
            }
        }
    }
    Ok(out)
}

impl Tokenizer {
    /// Serializes the model to the text format.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "version\t1");
        let _ = writeln!(out, "vocab_size\t{}", self.vocab_size());
        let _ = writeln!(out, "bos_id\t{}", self.bos_id());
        let _ = writeln!(out, "eos_id\t{}", self.eos_id());
        let _ = writeln!(out, "[vocab]");
        for id in 0..self.vocab_size() as u32 {
            let _ = writeln!(out, "{id}\t{}", escape(self.token(id).unwrap()));
        }
        let _ = writeln!(out, "[merges]");
        for (rank, (l, r)) in self.merges().iter().enumerate() {
            let _ = writeln!(out, "{rank}\t{}\t{}", escape(l), escape(r));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// Parses the text format, validating structure and invariants.
    pub fn from_file_str(text: &str) -> Result<Tokenizer> {
        let fail = |line: usize, detail: String| Error::TokenizerFile { line, detail };

        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut header = std::collections::HashMap::new();
        let mut vocab_start = 0;
        for (no, line) in lines.by_ref() {
            if line == "[vocab]" {
                vocab_start = no;
                break;
            }
            let (key, value) = line
                .split_once('\t')
                .ok_or_else(|| fail(no, format!("expected key<TAB>value, got {line:?}")))?;
            header.insert(key.to_string(), (no, value.to_string()));
        }
        if vocab_start == 0 {
            return Err(fail(text.lines().count(), "missing [vocab] section".into()));
        }
        let header_u32 = |key: &str| -> Result<u32> {
            let (no, value) = header
                .get(key)
                .ok_or_else(|| fail(vocab_start, format!("missing header field {key}")))?;
            value
                .parse::<u32>()
                .map_err(|_| fail(*no, format!("{key} must be an integer, got {value:?}")))
        };
        let version = header_u32("version")?;
        if version != 1 {
            let no = header["version"].0;
            return Err(fail(no, format!("unsupported version {version}")));
        }
        let vocab_size = header_u32("vocab_size")?;
        let bos_id = header_u32("bos_id")?;
        let eos_id = header_u32("eos_id")?;

        let mut vocab: Vec<String> = Vec::with_capacity(vocab_size as usize);
        let mut merges: Vec<(String, String)> = Vec::new();
        let mut in_merges = false;
        let mut last_line = vocab_start;
        for (no, line) in lines {
            last_line = no;
            if line == "[merges]" {
                in_merges = true;
                continue;
            }
            let mut fields = line.split('\t');
            let index = fields
                .next()
                .and_then(|f| f.parse::<usize>().ok())
                .ok_or_else(|| fail(no, format!("expected a numeric index, got {line:?}")))?;
            if !in_merges {
                if index != vocab.len() {
                    return Err(fail(no, format!("vocab ids must be dense; expected {}", vocab.len())));
                }
                let raw = fields
                    .next()
                    .ok_or_else(|| fail(no, "vocab line needs id<TAB>token".into()))?;
                if fields.next().is_some() {
                    return Err(fail(no, "vocab line has extra fields".into()));
                }
                let token = unescape(raw, no)?;
                if token.is_empty() {
                    return Err(fail(no, "empty token".into()));
                }
                vocab.push(token);
            } else {
                if index != merges.len() {
                    return Err(fail(no, format!("merge ranks must be dense; expected {}", merges.len())));
                }
                let (Some(l), Some(r), None) = (fields.next(), fields.next(), fields.next()) else {
                    return Err(fail(no, "merge line needs rank<TAB>left<TAB>right".into()));
                };
                merges.push((unescape(l, no)?, unescape(r, no)?));
            }
        }
        if !in_merges {
            return Err(fail(last_line, "missing [merges] section".into()));
        }
        if vocab.len() != vocab_size as usize {
            return Err(fail(
                last_line,
                format!("vocab_size says {} but {} tokens listed", vocab_size, vocab.len()),
            ));
        }
        if vocab_size < FIRST_LEARNED {
            return Err(fail(last_line, format!("vocabulary too small ({vocab_size})")));
        }
        for b in 0..=255u8 {
            let want = byte_token(b);
            let got = &vocab[(BYTE_BASE + b as u32) as usize];
            if got != &want {
                return Err(fail(
                    last_line,
                    format!("expected byte token {want} at id {}, found {got:?}", BYTE_BASE + b as u32),
                ));
            }
        }
        if bos_id >= vocab_size || eos_id >= vocab_size {
            return Err(fail(last_line, "special ids out of range".into()));
        }

        let model = Tokenizer::from_parts(vocab, merges, bos_id, eos_id)
            .map_err(|e| fail(last_line, e.to_string()))?;
        for (rank, (l, r)) in model.merges().iter().enumerate() {
            let joined = format!("{l}{r}");
            for part in [l.as_str(), r.as_str(), joined.as_str()] {
                if model.id_of(part).is_none() {
                    return Err(fail(
                        last_line,
                        format!("merge {rank} references {part:?}, which is not in the vocabulary"),
                    ));
                }
            }
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tokenizer> {
        let text = std::fs::read_to_string(path)?;
        Tokenizer::from_file_str(&text)
    }
}
