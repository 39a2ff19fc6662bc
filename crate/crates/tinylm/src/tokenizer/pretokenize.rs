//! Whitespace-and-digit pretokenization.
//!
//! Text is split on whitespace boundaries; a single preceding space is
//! carried on the next pretoken as a word-prefix marker so the split is
//! reversible. Every ASCII digit becomes its own pretoken.

/// One pretokenized unit. `space_prefix` records exactly one space consumed
/// immediately before `text`; reconstruction is the concatenation of
/// `(" " if space_prefix else "") + text` over all pretokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pretoken {
    pub space_prefix: bool,
    pub text: String,
}

impl Pretoken {
    /// Marker-style rendering: the prefix space shown as U+2581.
    pub fn display(&self) -> String {
        if self.space_prefix {
            format!("\u{2581}{}", self.text)
        } else {
            self.text.clone()
        }
    }
}

/// Splits `text` into pretokens. Runs of spaces beyond the one that attaches
/// to the following word become empty-bodied marker pretokens; non-space
/// whitespace characters stand alone.
pub fn pretokenize(text: &str) -> Vec<Pretoken> {
    let mut out = Vec::new();
    let mut pending_space = false;
    for c in text.chars() {
        if c == ' ' {
            if pending_space {
                out.push(Pretoken { space_prefix: true, text: String::new() });
            }
            pending_space = true;
        } else if c.is_whitespace() {
            if std::mem::take(&mut pending_space) {
                out.push(Pretoken { space_prefix: true, text: String::new() });
            }
            out.push(Pretoken { space_prefix: false, text: c.to_string() });
        } else if c.is_ascii_digit() {
            out.push(Pretoken {
                space_prefix: std::mem::take(&mut pending_space),
                text: c.to_string(),
            });
        } else {
            match out.last_mut() {
                // Continue the current word unless a boundary intervened.
                Some(last)
                    if !pending_space
                        && !last.text.is_empty()
                        && !last.text.chars().next().unwrap().is_whitespace()
                        && !last.text.chars().next().unwrap().is_ascii_digit() =>
                {
                    last.text.push(c);
                }
                _ => {
                    out.push(Pretoken {
                        space_prefix: std::mem::take(&mut pending_space),
                        text: c.to_string(),
                    });
                }
            }
        }
    }
    if pending_space {
        out.push(Pretoken { space_prefix: true, text: String::new() });
    }
    out
}

/// Inverse of [`pretokenize`]; exact for every input.
pub fn reconstruct(pretokens: &[Pretoken]) -> String {
    let mut s = String::new();
    for p in pretokens {
        if p.space_prefix {
            s.push(' ');
        }
        s.push_str(&p.text);
    }
    s
}
