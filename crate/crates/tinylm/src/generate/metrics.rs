//! Aggregate metrics over sampled generations: unbiased pass@k and
//! majority voting.

use crate::error::{Error, Result};
use std::collections::HashMap;

/// Conventional sample count for majority voting on MATH-style problems.
pub const MAJORITY_K_MATH: usize = 256;
/// Conventional sample count for majority voting on GSM8k-style problems.
pub const MAJORITY_K_GSM8K: usize = 100;

/// Probability that at least one of `k` samples drawn (without replacement)
/// from `n` attempts with `c` correct ones is correct: 1 - C(n-c,k)/C(n,k).
///
/// Uses the product form prod_{i=n-c+1..=n} (1 - k/i) for the miss
/// probability, which never forms a factorial and so cannot overflow.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n {
        return Err(Error::Domain(format!(
            "correct count {c} exceeds sample count {n}"
        )));
    }
    if k == 0 || k > n {
        return Err(Error::Domain(format!("k must lie in 1..={n}, got {k}")));
    }
    if n - c < k {
        // Too few incorrect samples to fill a draw: some sample passes.
        return Ok(1.0);
    }
    let mut miss = 1.0f64;
    for i in (n - c + 1)..=n {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

/// Most frequent answer; ties break toward the earliest first occurrence.
pub fn majority_vote<S: AsRef<str>>(answers: &[S]) -> Result<String> {
    if answers.is_empty() {
        return Err(Error::Domain("majority vote over an empty answer list".into()));
    }
    // (count, first occurrence index) per distinct answer; the comparator
    // is a strict total order, so hash iteration order cannot leak through.
    let mut tally: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, a) in answers.iter().enumerate() {
        tally.entry(a.as_ref()).or_insert((0, i)).0 += 1;
    }
    let winner = tally
        .iter()
        .max_by(|(_, (ca, fa)), (_, (cb, fb))| ca.cmp(cb).then(fb.cmp(fa)))
        .map(|(s, _)| *s)
        .expect("non-empty tally");
    Ok(winner.to_string())
}
