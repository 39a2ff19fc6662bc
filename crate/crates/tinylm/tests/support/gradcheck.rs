//! The gradient-check battery, shared between the per-op suite and the
//! acceptance gate.
//!
//! Non-scalar outputs are contracted to a scalar through a fixed random
//! linear functional (elementwise mul by a constant, then sum) so one
//! backward pass checks the whole Jacobian action.

use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinylm::model::{ForwardOptions, Model, ModelConfig};
use tinylm::tensor::{AttentionMode, Tape, TensorId};

// The references are f64, so finite differences stay noise-free at a
// step small enough to keep truncation error under the tolerance.
pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

/// Builds leaves from `shapes`, runs `build`, contracts with a random
/// functional, and compares backward grads to central differences of
/// `reference` (the same functional applied to the f64 forward).
/// Panics with coordinates on mismatch; returns the worst relative error.
pub fn run_check(
    name: &str,
    seed: u64,
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f32>> = shapes
        .iter()
        .map(|s| {
            (0..s.iter().product::<usize>()).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
        })
        .collect();

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = shapes
        .iter()
        .zip(&inputs)
        .map(|(s, d)| tape.leaf_from(s.to_vec(), d.clone(), true).unwrap())
        .collect();
    let out = build(&mut tape, &ids);
    let out_shape = tape.shape(out).to_vec();
    let n: usize = out_shape.iter().product();
    // Mixed-sign coefficients bounded away from zero, so no output
    // component is dropped from the functional.
    let coeffs: Vec<f32> = (0..n)
        .map(|_| rng.gen_range(0.25f32..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let cid = tape.leaf_from(out_shape, coeffs.clone(), false).unwrap();
    let prod = tape.mul(out, cid).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let x64: Vec<Vec<f64>> = inputs.iter().map(|v| to_f64(v)).collect();
    let c64 = to_f64(&coeffs);
    let eval =
        |x: &[Vec<f64>]| -> f64 { reference(x).iter().zip(&c64).map(|(a, b)| a * b).sum() };
    let mut worst = 0.0f64;
    for (leaf_idx, id) in ids.iter().enumerate() {
        let analytic = tape.grad(*id).expect("input leaves require grad").to_vec();
        for e in 0..analytic.len() {
            let mut xp = x64.clone();
            xp[leaf_idx][e] += H;
            let fp = eval(&xp);
            xp[leaf_idx][e] -= 2.0 * H;
            let fm = eval(&xp);
            let fd = (fp - fm) / (2.0 * H);
            let re = rel_err(f64::from(analytic[e]), fd);
            assert!(
                re < TOL,
                "{name}: leaf {leaf_idx} elem {e}: analytic {} vs fd {fd} (rel {re:.2e})",
                analytic[e]
            );
            worst = worst.max(re);
        }
    }
    worst
}

pub struct OpCase {
    pub name: &'static str,
    pub run: fn() -> f64,
}

/// One entry per differentiable kernel (plus composites that exercise
/// reshape and the shifted-position / offset variants).
pub fn op_cases() -> Vec<OpCase> {
    fn matmul() -> f64 {
        run_check(
            "matmul",
            11,
            &[&[2, 3], &[3, 4]],
            |t, ids| t.matmul(ids[0], ids[1]).unwrap(),
            |x| mm(&x[0], &x[1], 2, 3, 4),
        )
    }
    fn add() -> f64 {
        run_check(
            "add",
            12,
            &[&[2, 3], &[2, 3]],
            |t, ids| t.add(ids[0], ids[1]).unwrap(),
            |x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
        )
    }
    fn add_bias() -> f64 {
        run_check(
            "add_bias",
            13,
            &[&[3, 4], &[4]],
            |t, ids| t.add_bias(ids[0], ids[1]).unwrap(),
            |x| {
                x[0].chunks(4)
                    .flat_map(|row| row.iter().zip(&x[1]).map(|(a, b)| a + b))
                    .collect()
            },
        )
    }
    fn mul() -> f64 {
        run_check(
            "mul",
            14,
            &[&[2, 3], &[2, 3]],
            |t, ids| t.mul(ids[0], ids[1]).unwrap(),
            |x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
        )
    }
    fn scale() -> f64 {
        run_check(
            "scale",
            15,
            &[&[2, 3]],
            |t, ids| t.scale(ids[0], 1.7).unwrap(),
            |x| x[0].iter().map(|a| a * 1.7).collect(),
        )
    }
    fn silu_case() -> f64 {
        run_check(
            "silu",
            16,
            &[&[2, 3]],
            |t, ids| t.silu(ids[0]).unwrap(),
            |x| x[0].iter().map(|&a| silu(a)).collect(),
        )
    }
    fn softmax_rows() -> f64 {
        run_check(
            "softmax_rows",
            17,
            &[&[3, 5]],
            |t, ids| t.softmax_rows(ids[0]).unwrap(),
            |x| x[0].chunks(5).flat_map(|row| softmax(row)).collect(),
        )
    }
    fn cross_entropy_case() -> f64 {
        // Row 2 carries the ignore marker; its logits must get zero
        // gradient, which finite differences confirm for free.
        const TARGETS: [u32; 4] = [1, 6, 9, 3];
        run_check(
            "cross_entropy",
            18,
            &[&[4, 7]],
            |t, ids| t.cross_entropy(ids[0], &TARGETS, 9).unwrap(),
            |x| vec![cross_entropy(&x[0], 7, &TARGETS, 9)],
        )
    }
    fn embedding() -> f64 {
        // Index 2 repeats, so its table row accumulates two gradient rows.
        const IDS: [u32; 4] = [2, 0, 3, 2];
        run_check(
            "embedding",
            19,
            &[&[5, 3]],
            |t, ids| t.embedding(ids[0], &IDS).unwrap(),
            |x| IDS.iter().flat_map(|&i| x[0][i as usize * 3..][..3].to_vec()).collect(),
        )
    }
    fn rmsnorm_case() -> f64 {
        run_check(
            "rmsnorm",
            20,
            &[&[3, 4], &[4]],
            |t, ids| t.rmsnorm(ids[0], ids[1], 1e-5).unwrap(),
            |x| rmsnorm(&x[0], &x[1], 4, 1e-5f32 as f64),
        )
    }
    fn rope_case() -> f64 {
        const POS: [usize; 4] = [0, 1, 2, 3];
        run_check(
            "rope",
            21,
            &[&[4, 2, 4]],
            |t, ids| t.rope(ids[0], &POS, 10000.0).unwrap(),
            |x| rope(&x[0], 4, 2, 4, &POS, 10000.0),
        )
    }
    fn rope_shifted() -> f64 {
        const POS: [usize; 3] = [5, 6, 7];
        run_check(
            "rope_shifted",
            22,
            &[&[3, 2, 4]],
            |t, ids| t.rope(ids[0], &POS, 10000.0).unwrap(),
            |x| rope(&x[0], 3, 2, 4, &POS, 10000.0),
        )
    }
    fn attention_naive() -> f64 {
        run_check(
            "attention_naive",
            23,
            &[&[4, 2, 4], &[4, 2, 4], &[4, 2, 4]],
            |t, ids| t.attention_causal(ids[0], ids[1], ids[2], 0, AttentionMode::Naive).unwrap(),
            |x| attention_causal(&x[0], &x[1], &x[2], 4, 4, 2, 4, 0),
        )
    }
    fn attention_stream() -> f64 {
        // Same seed as the naive case: identical data through both kernels.
        run_check(
            "attention_stream",
            23,
            &[&[4, 2, 4], &[4, 2, 4], &[4, 2, 4]],
            |t, ids| {
                t.attention_causal(ids[0], ids[1], ids[2], 0, AttentionMode::MemoryEfficient)
                    .unwrap()
            },
            |x| attention_causal(&x[0], &x[1], &x[2], 4, 4, 2, 4, 0),
        )
    }
    fn attention_offset() -> f64 {
        let mut worst = 0.0f64;
        for mode in [AttentionMode::Naive, AttentionMode::MemoryEfficient] {
            worst = worst.max(run_check(
                "attention_offset",
                24,
                &[&[3, 2, 4], &[6, 2, 4], &[6, 2, 4]],
                |t, ids| t.attention_causal(ids[0], ids[1], ids[2], 3, mode).unwrap(),
                |x| attention_causal(&x[0], &x[1], &x[2], 3, 6, 2, 4, 3),
            ));
        }
        worst
    }
    fn transpose() -> f64 {
        run_check(
            "transpose",
            25,
            &[&[2, 3]],
            |t, ids| t.transpose(ids[0]).unwrap(),
            |x| {
                let mut out = vec![0.0; 6];
                for i in 0..2 {
                    for j in 0..3 {
                        out[j * 2 + i] = x[0][i * 3 + j];
                    }
                }
                out
            },
        )
    }
    fn concat_axis0() -> f64 {
        run_check(
            "concat_axis0",
            26,
            &[&[2, 3], &[4, 3]],
            |t, ids| t.concat(&[ids[0], ids[1]], 0).unwrap(),
            |x| x[0].iter().chain(&x[1]).copied().collect(),
        )
    }
    fn concat_axis1() -> f64 {
        run_check(
            "concat_axis1",
            27,
            &[&[2, 3], &[2, 2]],
            |t, ids| t.concat(&[ids[0], ids[1]], 1).unwrap(),
            |x| {
                let mut out = Vec::with_capacity(10);
                for i in 0..2 {
                    out.extend_from_slice(&x[0][i * 3..][..3]);
                    out.extend_from_slice(&x[1][i * 2..][..2]);
                }
                out
            },
        )
    }
    fn sum() -> f64 {
        run_check("sum", 28, &[&[2, 3]], |t, ids| t.sum(ids[0]).unwrap(), |x| {
            vec![x[0].iter().sum()]
        })
    }
    fn mean() -> f64 {
        run_check("mean", 29, &[&[7]], |t, ids| t.mean(ids[0]).unwrap(), |x| {
            vec![x[0].iter().sum::<f64>() / 7.0]
        })
    }
    fn reshape_silu() -> f64 {
        run_check(
            "reshape_silu",
            30,
            &[&[2, 6]],
            |t, ids| {
                let r = t.reshape(ids[0], vec![3, 4]).unwrap();
                t.silu(r).unwrap()
            },
            |x| x[0].iter().map(|&a| silu(a)).collect(),
        )
    }

    vec![
        OpCase { name: "matmul", run: matmul },
        OpCase { name: "add", run: add },
        OpCase { name: "add_bias", run: add_bias },
        OpCase { name: "mul", run: mul },
        OpCase { name: "scale", run: scale },
        OpCase { name: "silu", run: silu_case },
        OpCase { name: "softmax_rows", run: softmax_rows },
        OpCase { name: "cross_entropy", run: cross_entropy_case },
        OpCase { name: "embedding", run: embedding },
        OpCase { name: "rmsnorm", run: rmsnorm_case },
        OpCase { name: "rope", run: rope_case },
        OpCase { name: "rope_shifted", run: rope_shifted },
        OpCase { name: "attention_naive", run: attention_naive },
        OpCase { name: "attention_stream", run: attention_stream },
        OpCase { name: "attention_offset", run: attention_offset },
        OpCase { name: "transpose", run: transpose },
        OpCase { name: "concat_axis0", run: concat_axis0 },
        OpCase { name: "concat_axis1", run: concat_axis1 },
        OpCase { name: "sum", run: sum },
        OpCase { name: "mean", run: mean },
        OpCase { name: "reshape_silu", run: reshape_silu },
    ]
}

/// Runs the named case from [`op_cases`].
pub fn run_case(name: &str) -> f64 {
    let case = op_cases()
        .into_iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("no gradcheck case named {name:?}"));
    (case.run)()
}

/// Whole-model check: analytic gradients for every one of the ~1.9k
/// parameters of the 2-layer toy model against central differences of the
/// f64 reference loss. Returns (worst relative error, coordinates checked).
pub fn check_full_model() -> (f64, u64) {
    let cfg = ModelConfig {
        dim: 8,
        n_heads: 2,
        n_layers: 2,
        vocab_size: 11,
        max_seq_len: 16,
        ffn_multiple: 8,
        ..ModelConfig::default()
    };
    let mut model = Model::init(cfg, 3).unwrap();
    let ids = [1u32, 4, 2, 9, 5];
    let targets = [4u32, 2, u32::MAX, 5, 10];

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let logits = bound.forward(&mut tape, &ids, &ForwardOptions::default(), None).unwrap();
    let loss = tape.cross_entropy(logits, &targets, u32::MAX).unwrap();
    let loss_val = f64::from(tape.data(loss)[0]);
    tape.backward(loss).unwrap();
    bound.pull_grads(&tape, &mut model.weights).unwrap();

    let params = weights_to_f64(&model.weights);
    let ref_val = ref_loss(&cfg, &params, &ids, &targets);
    assert!(
        rel_err(loss_val, ref_val) < 1e-5,
        "forward disagrees with reference: {loss_val} vs {ref_val}"
    );

    let mut checked = 0u64;
    let mut worst = 0.0f64;
    for (pi, (name, tensor)) in model.weights.named().into_iter().enumerate() {
        let analytic = tensor.grad().expect("trained weights require grad");
        for e in 0..analytic.len() {
            let mut p = params.clone();
            p[pi][e] += H;
            let fp = ref_loss(&cfg, &p, &ids, &targets);
            p[pi][e] -= 2.0 * H;
            let fm = ref_loss(&cfg, &p, &ids, &targets);
            let fd = (fp - fm) / (2.0 * H);
            let re = rel_err(f64::from(analytic[e]), fd);
            assert!(re < TOL, "{name}[{e}]: analytic {} vs fd {fd} (rel {re:.2e})", analytic[e]);
            worst = worst.max(re);
            checked += 1;
        }
    }
    assert_eq!(checked, cfg.count_params(), "every parameter coordinate checked");
    (worst, checked)
}
