//! 64-bit reference implementations and the central-difference driver
//! shared by the integration suites. Everything here works on plain
//! slices, independently of the tape.

#![allow(dead_code)] // each test binary uses its own subset

pub mod gradcheck;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tinylm::model::{ModelConfig, ModelWeights};

/// Digit-rich training text for tokenizer invariants.
pub const TOKENIZER_CORPUS: &[&str] = &[
    "The quick brown fox jumps over the lazy dog 42 times.",
    "In 1998 the route 66 survey counted 1234567890 cars,",
    "and the lab notebooks filled 365 pages per year.",
    "Model sizes were 7000000000 and 13000000000 parameters.",
    "the cat sat on the mat and the dog lay by the door",
];

/// Random string mixing ASCII words, punctuation, digits, whitespace runs,
/// and arbitrary Unicode scalars (including the space marker itself).
pub fn random_utf8(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(0..40);
    let mut s = String::new();
    for _ in 0..len {
        match rng.gen_range(0..10) {
            0..=3 => s.push(rng.gen_range(b'a'..=b'z') as char),
            4 => s.push(rng.gen_range(b'0'..=b'9') as char),
            5 => s.push([' ', ' ', '\t', '\n'][rng.gen_range(0..4)]),
            6 => s.push(['.', ',', '!', '?', ':', '\'', '"'][rng.gen_range(0..7)]),
            7 => s.push(['é', 'ß', 'λ', '中', '文', '🚀', '𝄞'][rng.gen_range(0..7)]),
            8 => s.push('\u{2581}'),
            _ => {
                // Arbitrary scalar value; skip the surrogate gap.
                loop {
                    if let Some(c) = char::from_u32(rng.gen_range(1..0x11000)) {
                        s.push(c);
                        break;
                    }
                }
            }
        }
    }
    s
}

/// Index of the strictly greatest logit; first index wins ties.
pub fn argmax(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Relative error with an absolute floor, so near-zero gradients compare
/// on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Central finite differences of `f` at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..g.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

pub fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| f64::from(v)).collect()
}

/// Weight data in `ModelWeights::named` order, widened to f64.
pub fn weights_to_f64(w: &ModelWeights) -> Vec<Vec<f64>> {
    w.named().into_iter().map(|(_, t)| to_f64(t.data())).collect()
}

// Reference ops.

pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean negative log-likelihood over rows whose target is not `ignore`.
pub fn cross_entropy(logits: &[f64], vocab: usize, targets: &[u32], ignore: u32) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, &t) in logits.chunks(vocab).zip(targets) {
        if t == ignore {
            continue;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
        n += 1;
    }
    total / n as f64
}

/// Per-row x * gain / sqrt(mean(x^2) + eps) over the last dimension.
pub fn rmsnorm(x: &[f64], gain: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row_o, row_x) in out.chunks_mut(d).zip(x.chunks(d)) {
        let ms = row_x.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        for ((o, &xv), &gv) in row_o.iter_mut().zip(row_x).zip(gain) {
            *o = gv * xv * r;
        }
    }
    out
}

/// Rotates even/odd pairs of `[seq, heads, hd]` by pos * base^(-2t/hd).
pub fn rope(x: &[f64], seq: usize, heads: usize, hd: usize, positions: &[usize], base: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..seq {
        let pos = positions[i] as f64;
        for h in 0..heads {
            let off = (i * heads + h) * hd;
            for t in 0..hd / 2 {
                let angle = pos * base.powf(-2.0 * t as f64 / hd as f64);
                let (sin, cos) = angle.sin_cos();
                let (x0, x1) = (x[off + 2 * t], x[off + 2 * t + 1]);
                out[off + 2 * t] = x0 * cos - x1 * sin;
                out[off + 2 * t + 1] = x0 * sin + x1 * cos;
            }
        }
    }
    out
}

/// Causal attention over `[sq, heads, hd]` queries and `[kv, heads, hd]`
/// keys/values; query row i sees keys `0..=i + q_offset`.
pub fn attention_causal(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    sq: usize,
    kv: usize,
    heads: usize,
    hd: usize,
    q_offset: usize,
) -> Vec<f64> {
    assert_eq!(q_offset + sq, kv);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; sq * heads * hd];
    for i in 0..sq {
        let visible = i + q_offset + 1;
        for h in 0..heads {
            let qrow = &q[(i * heads + h) * hd..][..hd];
            let scores: Vec<f64> = (0..visible)
                .map(|j| {
                    let krow = &k[(j * heads + h) * hd..][..hd];
                    qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect();
            let probs = softmax(&scores);
            let orow = &mut out[(i * heads + h) * hd..][..hd];
            for (j, &p) in probs.iter().enumerate() {
                let vrow = &v[(j * heads + h) * hd..][..hd];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
    }
    out
}

fn add_in_place(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Full reference transformer loss. `params` holds the weight data in
/// `ModelWeights::named` order.
pub fn ref_loss(cfg: &ModelConfig, params: &[Vec<f64>], ids: &[u32], targets: &[u32]) -> f64 {
    let (d, heads) = (cfg.dim, cfg.n_heads);
    let hd = cfg.head_dim();
    let ffn = cfg.ffn_hidden_dim();
    let (v, seq) = (cfg.vocab_size, ids.len());
    let eps = f64::from(cfg.norm_eps);
    let base = f64::from(cfg.rope_base);
    let positions: Vec<usize> = (0..seq).collect();

    let tok_emb = &params[0];
    let mut x: Vec<f64> = Vec::with_capacity(seq * d);
    for &id in ids {
        x.extend_from_slice(&tok_emb[id as usize * d..][..d]);
    }

    for l in 0..cfg.n_layers {
        let p = 1 + 9 * l;
        let (attn_norm, wq, wk, wv, wo) =
            (&params[p], &params[p + 1], &params[p + 2], &params[p + 3], &params[p + 4]);
        let (ffn_norm, w_gate, w_up, w_down) =
            (&params[p + 5], &params[p + 6], &params[p + 7], &params[p + 8]);

        let normed = rmsnorm(&x, attn_norm, d, eps);
        let q = rope(&mm(&normed, wq, seq, d, d), seq, heads, hd, &positions, base);
        let k = rope(&mm(&normed, wk, seq, d, d), seq, heads, hd, &positions, base);
        let val = mm(&normed, wv, seq, d, d);
        let att = attention_causal(&q, &k, &val, seq, seq, heads, hd, 0);
        add_in_place(&mut x, &mm(&att, wo, seq, d, d));

        let normed = rmsnorm(&x, ffn_norm, d, eps);
        let gate: Vec<f64> = mm(&normed, w_gate, seq, d, ffn).iter().map(|&g| silu(g)).collect();
        let up = mm(&normed, w_up, seq, d, ffn);
        let hidden: Vec<f64> = gate.iter().zip(&up).map(|(a, b)| a * b).collect();
        add_in_place(&mut x, &mm(&hidden, w_down, seq, ffn, d));
    }

    let final_norm = &params[1 + 9 * cfg.n_layers];
    let output = &params[2 + 9 * cfg.n_layers];
    let x = rmsnorm(&x, final_norm, d, eps);
    let logits = mm(&x, output, seq, d, v);
    cross_entropy(&logits, v, targets, u32::MAX)
}
