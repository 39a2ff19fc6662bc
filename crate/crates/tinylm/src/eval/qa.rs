//! Closed-book QA plumbing: few-shot prompt assembly, answer extraction
//! from a generation, and exact-match normalization.

use regex::Regex;
use std::sync::OnceLock;

/// "Answer these questions:" header, `Q:`/`A:` exemplar pairs in order,
/// then the question with an open `A:` stub.
pub fn format_qa_prompt(exemplars: &[(String, String)], question: &str) -> String {
    let mut s = String::from("Answer these questions:\n");
    for (q, a) in exemplars {
        s.push_str(&format!("Q: {q}\nA: {a}\n"));
    }
    s.push_str(&format!("Q: {question}\nA:"));
    s
}

/// Prefix of the generation up to the first line break, final dot, or
/// comma, trimmed. "Final" means the mark ends the string or is followed
/// by whitespace, so mid-token marks ("U.S.", "1,000") do not cut.
pub fn extract_answer(generated: &str) -> String {
    for (i, c) in generated.char_indices() {
        match c {
            '\n' => return generated[..i].trim().to_string(),
            '.' | ',' => {
                let rest = &generated[i + c.len_utf8()..];
                if rest.is_empty() || rest.starts_with(|r: char| r.is_whitespace()) {
                    return generated[..i].trim().to_string();
                }
            }
            _ => {}
        }
    }
    generated.trim().to_string()
}

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").unwrap())
}

fn articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").unwrap())
}

/// Lowercase, strip Unicode punctuation, drop whole-word English articles,
/// and collapse whitespace runs.
pub fn normalize_answer(s: &str) -> String {
    let s = s.to_lowercase();
    let s = punctuation().replace_all(&s, "");
    let s = articles().replace_all(&s, " ");
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Credit iff the generated answer equals any acceptable answer after
/// normalizing both sides.
pub fn exact_match<S: AsRef<str>>(generated: &str, acceptable: &[S]) -> bool {
    let g = normalize_answer(generated);
    acceptable.iter().any(|a| normalize_answer(a.as_ref()) == g)
}
