//! Reverse-mode autodiff over a linear operation tape.
//!
//! Ops append nodes in execution order, so the node list is already a
//! topological order of the DAG; `backward` walks it once in reverse and
//! accumulates gradients additively into every tensor that requires them.

use super::{alloc_f32, Tensor};
use crate::error::{Error, Result};
use std::collections::VecDeque;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

/// Which causal-attention kernel to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Materializes the full masked score matrix. Reference path.
    Naive,
    /// Streams each query row over its visible prefix; never builds a
    /// seq x seq buffer and never touches masked scores.
    MemoryEfficient,
}

/// What a checkpointed block retains for its backward replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointPolicy {
    /// Keep only the block inputs; recompute everything else.
    BlockInputs,
    /// Keep block inputs plus the outputs of matmuls inside the block, so the
    /// replay skips recomputing them.
    BlockInputsAndLinear,
}

type ReplayFn = Box<dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>>;

struct CheckpointNode {
    inputs: Vec<TensorId>,
    replay: ReplayFn,
    saved_matmuls: Option<Vec<Vec<f32>>>,
}

enum Node {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBias { x: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f32 },
    Silu { x: TensorId },
    SoftmaxRows { x: TensorId },
    CrossEntropy { logits: TensorId, targets: Vec<u32>, ignore_index: u32, n_valid: usize },
    Embedding { table: TensorId, ids: Vec<u32> },
    Reshape { x: TensorId },
    Transpose { x: TensorId },
    Concat { parts: Vec<TensorId>, axis: usize },
    Sum { x: TensorId },
    Mean { x: TensorId },
    RmsNorm { x: TensorId, gain: TensorId, inv_rms: Vec<f32> },
    Rope { x: TensorId, positions: Vec<usize>, base: f32 },
    AttnNaive { q: TensorId, k: TensorId, v: TensorId, q_offset: usize, probs: Vec<f32> },
    AttnStream {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        q_offset: usize,
        row_max: Vec<f32>,
        row_denom: Vec<f32>,
    },
    Checkpoint(CheckpointNode),
}

enum MatmulTap {
    Off,
    Capture(Vec<Vec<f32>>),
    Feed(VecDeque<Vec<f32>>),
}

/// Records forward operations and runs reverse-mode backpropagation.
///
/// A tape and the tensors it owns are confined to one thread; `backward`
/// freezes the tape, after which no further ops or backward passes are
/// accepted.
pub struct Tape {
    tensors: Vec<Tensor>,
    nodes: Vec<Node>,
    frozen: bool,
    matmul_tap: MatmulTap,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            tensors: Vec::new(),
            nodes: Vec::new(),
            frozen: false,
            matmul_tap: MatmulTap::Off,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_open(&self) -> Result<()> {
        if self.frozen {
            Err(Error::TapeFrozen)
        } else {
            Ok(())
        }
    }

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<TensorId> {
        self.check_open()?;
        let mut data = alloc_f32(t.numel());
        data.copy_from_slice(t.data());
        Ok(self.push(t.shape().to_vec(), data, Node::Leaf, requires_grad))
    }

    /// Copies a tensor onto the tape as a constant (no gradient).
    pub fn constant(&mut self, t: &Tensor) -> Result<TensorId> {
        self.leaf(t, false)
    }

    /// Leaf from raw parts; used for token-id style inputs and tests.
    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<TensorId> {
        let t = Tensor::new(shape, data)?;
        self.leaf(&t, requires_grad)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, node: Node, requires_grad: bool) -> TensorId {
        let id = TensorId(self.tensors.len() as u32);
        let mut t = Tensor::new(shape, data).expect("ops construct consistent shapes");
        t.set_requires_grad_raw(requires_grad);
        t.set_tape_id(id);
        self.tensors.push(t);
        self.nodes.push(node);
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.tensors[id.index()].requires_grad()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.tensors[id.index()].shape()
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        self.tensors[id.index()].data()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.tensors[id.index()].grad()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.index()]
    }

    /// Clones the value out of the tape as a detached tensor.
    pub fn detach(&self, id: TensorId) -> Tensor {
        let t = &self.tensors[id.index()];
        Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("tape tensor is consistent")
    }

    // -- forward ops --------------------------------------------------------

    /// C[i,j] = sum_t A[i,t] * B[t,j].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: ash, rhs: bsh });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let data = match &mut self.matmul_tap {
            MatmulTap::Feed(queue) => {
                let fed = queue.pop_front().ok_or_else(|| {
                    Error::Input("checkpoint replay ran out of saved linear outputs".into())
                })?;
                if fed.len() != m * n {
                    return Err(Error::Input(
                        "checkpoint replay saw a saved linear output of the wrong size".into(),
                    ));
                }
                fed
            }
            _ => mm_nn(self.data(a), self.data(b), m, k, n),
        };
        if let MatmulTap::Capture(saved) = &mut self.matmul_tap {
            saved.push(data.clone());
        }
        let req = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Node::Matmul { a, b }, req))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_open()?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = alloc_f32(self.data(a).len());
        for ((o, &x), &y) in data.iter_mut().zip(self.data(a)).zip(self.data(b)) {
            *o = x + y;
        }
        let (shape, req) = (self.shape(a).to_vec(), self.needs(a) || self.needs(b));
        Ok(self.push(shape, data, Node::Add { a, b }, req))
    }

    /// Row-wise bias add: x[..., d] + bias[d]. The only broadcast besides
    /// scalar scaling.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let xsh = self.shape(x).to_vec();
        let bsh = self.shape(bias).to_vec();
        let d = *xsh.last().unwrap_or(&0);
        if bsh.len() != 1 || bsh[0] != d {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: xsh, rhs: bsh });
        }
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut data = alloc_f32(xd.len());
        for (row_o, row_x) in data.chunks_mut(d).zip(xd.chunks(d)) {
            for ((o, &xv), &bv) in row_o.iter_mut().zip(row_x).zip(bd) {
                *o = xv + bv;
            }
        }
        let req = self.needs(x) || self.needs(bias);
        Ok(self.push(xsh, data, Node::AddBias { x, bias }, req))
    }

    /// Hadamard product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_open()?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = alloc_f32(self.data(a).len());
        for ((o, &x), &y) in data.iter_mut().zip(self.data(a)).zip(self.data(b)) {
            *o = x * y;
        }
        let (shape, req) = (self.shape(a).to_vec(), self.needs(a) || self.needs(b));
        Ok(self.push(shape, data, Node::Mul { a, b }, req))
    }

    /// Scalar-times-tensor.
    pub fn scale(&mut self, x: TensorId, c: f32) -> Result<TensorId> {
        self.check_open()?;
        let mut data = alloc_f32(self.data(x).len());
        for (o, &v) in data.iter_mut().zip(self.data(x)) {
            *o = c * v;
        }
        let (shape, req) = (self.shape(x).to_vec(), self.needs(x));
        Ok(self.push(shape, data, Node::Scale { x, c }, req))
    }

    /// silu(x) = x * sigmoid(x).
    pub fn silu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let mut data = alloc_f32(self.data(x).len());
        for (o, &v) in data.iter_mut().zip(self.data(x)) {
            *o = v * sigmoid(v);
        }
        let (shape, req) = (self.shape(x).to_vec(), self.needs(x));
        Ok(self.push(shape, data, Node::Silu { x }, req))
    }

    /// Row-wise softmax of a 2-D tensor, computed with max-subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 2 {
            return Err(Error::InvalidShape {
                op: "softmax_rows",
                shape: xsh,
                detail: "expected rank 2".into(),
            });
        }
        let (n, m) = (xsh[0], xsh[1]);
        let xd = self.data(x);
        let mut data = alloc_f32(n * m);
        for (row_o, row_x) in data.chunks_mut(m).zip(xd.chunks(m)) {
            softmax_into(row_x, row_o);
        }
        let req = self.needs(x);
        Ok(self.push(xsh, data, Node::SoftmaxRows { x }, req))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping positions equal to `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        ignore_index: u32,
    ) -> Result<TensorId> {
        self.check_open()?;
        let lsh = self.shape(logits).to_vec();
        if lsh.len() != 2 || lsh[0] != targets.len() {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: lsh,
                detail: format!("expected [{} x V] logits", targets.len()),
            });
        }
        let vocab = lsh[1];
        let mut n_valid = 0usize;
        for &t in targets {
            if t == ignore_index {
                continue;
            }
            if t as usize >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t as usize,
                    bound: vocab,
                });
            }
            n_valid += 1;
        }
        if n_valid == 0 {
            return Err(Error::NoValidTargets);
        }
        let ld = self.data(logits);
        let mut total = 0.0f32;
        for (row, &t) in ld.chunks(vocab).zip(targets) {
            if t == ignore_index {
                continue;
            }
            total += log_sum_exp(row) - row[t as usize];
        }
        let loss = total / n_valid as f32;
        let mut data = alloc_f32(1);
        data[0] = loss;
        let req = self.needs(logits);
        let node = Node::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            ignore_index,
            n_valid,
        };
        Ok(self.push(vec![1], data, node, req))
    }

    /// Row lookup: out[i, :] = table[ids[i], :]. Backward scatter-adds.
    pub fn embedding(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        self.check_open()?;
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding",
                shape: tsh,
                detail: "expected rank-2 table".into(),
            });
        }
        let (vocab, dim) = (tsh[0], tsh[1]);
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup needs at least one id".into()));
        }
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "embedding id",
                    index: id as usize,
                    bound: vocab,
                });
            }
        }
        let td = self.data(table);
        let mut data = alloc_f32(ids.len() * dim);
        for (row_o, &id) in data.chunks_mut(dim).zip(ids) {
            row_o.copy_from_slice(&td[id as usize * dim..(id as usize + 1) * dim]);
        }
        let req = self.needs(table);
        Ok(self.push(
            vec![ids.len(), dim],
            data,
            Node::Embedding { table, ids: ids.to_vec() },
            req,
        ))
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        self.check_open()?;
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                detail: format!("incompatible with {} elements", self.data(x).len()),
            });
        }
        let mut data = alloc_f32(numel);
        data.copy_from_slice(self.data(x));
        let req = self.needs(x);
        Ok(self.push(shape, data, Node::Reshape { x }, req))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: xsh,
                detail: "expected rank 2".into(),
            });
        }
        let (r, c) = (xsh[0], xsh[1]);
        let xd = self.data(x);
        let mut data = alloc_f32(r * c);
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let req = self.needs(x);
        Ok(self.push(vec![c, r], data, Node::Transpose { x }, req))
    }

    /// Concatenates tensors along `axis`. All other extents must agree.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        self.check_open()?;
        if parts.is_empty() {
            return Err(Error::Input("concat needs at least one part".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: first,
                detail: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = alloc_f32(outer * axis_total * inner);
        let mut base = 0usize;
        for &p in parts {
            let ext = self.shape(p)[axis];
            let pd = self.data(p);
            let block = ext * inner;
            for o in 0..outer {
                let src = &pd[o * block..(o + 1) * block];
                let dst_start = o * axis_total * inner + base * inner;
                data[dst_start..dst_start + block].copy_from_slice(src);
            }
            base += ext;
        }
        let req = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out_shape, data, Node::Concat { parts: parts.to_vec(), axis }, req))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let total: f32 = self.data(x).iter().sum();
        let mut data = alloc_f32(1);
        data[0] = total;
        let req = self.needs(x);
        Ok(self.push(vec![1], data, Node::Sum { x }, req))
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let n = self.data(x).len();
        let total: f32 = self.data(x).iter().sum();
        let mut data = alloc_f32(1);
        data[0] = total / n as f32;
        let req = self.needs(x);
        Ok(self.push(vec![1], data, Node::Mean { x }, req))
    }

    /// y_i = gain_i * x_i / sqrt(mean_j x_j^2 + eps), row-wise over the last
    /// axis.
    pub fn rmsnorm(&mut self, x: TensorId, gain: TensorId, eps: f32) -> Result<TensorId> {
        self.check_open()?;
        let xsh = self.shape(x).to_vec();
        let gsh = self.shape(gain).to_vec();
        let d = *xsh.last().unwrap_or(&0);
        if gsh.len() != 1 || gsh[0] != d {
            return Err(Error::ShapeMismatch { op: "rmsnorm", lhs: xsh, rhs: gsh });
        }
        let rows = self.data(x).len() / d;
        let xd = self.data(x);
        let gd = self.data(gain);
        let mut data = alloc_f32(xd.len());
        let mut inv_rms = Vec::with_capacity(rows);
        for (row_o, row_x) in data.chunks_mut(d).zip(xd.chunks(d)) {
            let ms: f32 = row_x.iter().map(|&v| v * v).sum::<f32>() / d as f32;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for ((o, &xv), &gv) in row_o.iter_mut().zip(row_x).zip(gd) {
                *o = gv * xv * r;
            }
        }
        let req = self.needs(x) || self.needs(gain);
        Ok(self.push(xsh, data, Node::RmsNorm { x, gain, inv_rms }, req))
    }

    /// Rotates each even/odd dimension pair of `x[seq, heads, head_dim]` by
    /// `positions[i] * base^(-2t/head_dim)` radians.
    pub fn rope(&mut self, x: TensorId, positions: &[usize], base: f32) -> Result<TensorId> {
        self.check_open()?;
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 3 {
            return Err(Error::InvalidShape {
                op: "rope",
                shape: xsh,
                detail: "expected [seq, heads, head_dim]".into(),
            });
        }
        let (seq, heads, hd) = (xsh[0], xsh[1], xsh[2]);
        if hd % 2 != 0 {
            return Err(Error::Config(format!("rope requires even head_dim, got {hd}")));
        }
        if positions.len() != seq {
            return Err(Error::Input(format!(
                "rope expects {} positions, got {}",
                seq,
                positions.len()
            )));
        }
        let xd = self.data(x);
        let mut data = alloc_f32(xd.len());
        apply_rope(xd, &mut data, seq, heads, hd, positions, base, false);
        let req = self.needs(x);
        Ok(self.push(
            xsh,
            data,
            Node::Rope { x, positions: positions.to_vec(), base },
            req,
        ))
    }

    /// Multi-head causal attention over `[seq, heads, head_dim]` inputs.
    ///
    /// Query row `i` sits at absolute position `i + q_offset` and attends to
    /// keys `0..=i + q_offset`; `q_offset + seq_q` must equal the key count.
    /// Scores are scaled by `1/sqrt(head_dim)`.
    pub fn attention_causal(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        q_offset: usize,
        mode: AttentionMode,
    ) -> Result<TensorId> {
        self.check_open()?;
        let qsh = self.shape(q).to_vec();
        let ksh = self.shape(k).to_vec();
        let vsh = self.shape(v).to_vec();
        if qsh.len() != 3 || ksh.len() != 3 || qsh[1] != ksh[1] || qsh[2] != ksh[2] {
            return Err(Error::ShapeMismatch { op: "attention", lhs: qsh, rhs: ksh });
        }
        if ksh != vsh {
            return Err(Error::ShapeMismatch { op: "attention", lhs: ksh, rhs: vsh });
        }
        let (sq, heads, hd) = (qsh[0], qsh[1], qsh[2]);
        let kv = ksh[0];
        if q_offset + sq != kv {
            return Err(Error::Input(format!(
                "attention expects q_offset + seq_q == kv_len, got {q_offset} + {sq} != {kv}"
            )));
        }
        let scale = 1.0 / (hd as f32).sqrt();
        let qd = self.data(q);
        let kd = self.data(k);
        let vd = self.data(v);
        let req = self.needs(q) || self.needs(k) || self.needs(v);
        match mode {
            AttentionMode::Naive => {
                let mut out = alloc_f32(sq * heads * hd);
                // The full seq_q x kv probability matrix, by design.
                let mut probs = alloc_f32(sq * heads * kv);
                for i in 0..sq {
                    let visible = i + q_offset + 1;
                    for h in 0..heads {
                        let qrow = &qd[(i * heads + h) * hd..(i * heads + h + 1) * hd];
                        let mut scores = alloc_f32(visible);
                        for (j, s) in scores.iter_mut().enumerate() {
                            let krow = &kd[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                            *s = dot(qrow, krow) * scale;
                        }
                        let prow = &mut probs[(i * heads + h) * kv..(i * heads + h) * kv + visible];
                        softmax_into(&scores, prow);
                        let orow = &mut out[(i * heads + h) * hd..(i * heads + h + 1) * hd];
                        for (j, &p) in prow.iter().enumerate() {
                            let vrow = &vd[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                            for (o, &vv) in orow.iter_mut().zip(vrow) {
                                *o += p * vv;
                            }
                        }
                    }
                }
                Ok(self.push(qsh, out, Node::AttnNaive { q, k, v, q_offset, probs }, req))
            }
            AttentionMode::MemoryEfficient => {
                let mut out = alloc_f32(sq * heads * hd);
                let mut row_max = alloc_f32(sq * heads);
                let mut row_denom = alloc_f32(sq * heads);
                let mut acc = alloc_f32(hd);
                for i in 0..sq {
                    let visible = i + q_offset + 1;
                    for h in 0..heads {
                        let qrow = &qd[(i * heads + h) * hd..(i * heads + h + 1) * hd];
                        let mut m = f32::NEG_INFINITY;
                        let mut l = 0.0f32;
                        acc.fill(0.0);
                        for j in 0..visible {
                            let krow = &kd[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                            let s = dot(qrow, krow) * scale;
                            if s > m {
                                let correction = if m.is_finite() { (m - s).exp() } else { 0.0 };
                                l *= correction;
                                for a in acc.iter_mut() {
                                    *a *= correction;
                                }
                                m = s;
                            }
                            let w = (s - m).exp();
                            l += w;
                            let vrow = &vd[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                            for (a, &vv) in acc.iter_mut().zip(vrow) {
                                *a += w * vv;
                            }
                        }
                        let orow = &mut out[(i * heads + h) * hd..(i * heads + h + 1) * hd];
                        for (o, &a) in orow.iter_mut().zip(&acc) {
                            *o = a / l;
                        }
                        row_max[i * heads + h] = m;
                        row_denom[i * heads + h] = l;
                    }
                }
                let node = Node::AttnStream { q, k, v, q_offset, row_max, row_denom };
                Ok(self.push(qsh, out, node, req))
            }
        }
    }

    /// Attention probabilities recorded by the naive kernel, as
    /// `([seq_q, heads, kv], probs)`. Test hook; `None` for other nodes.
    pub fn attention_weights(&self, id: TensorId) -> Option<(Vec<usize>, &[f32])> {
        match &self.nodes[id.index()] {
            Node::AttnNaive { q, k, probs, .. } => {
                let sq = self.shape(*q)[0];
                let heads = self.shape(*q)[1];
                let kv = self.shape(*k)[0];
                Some((vec![sq, heads, kv], probs.as_slice()))
            }
            _ => None,
        }
    }

    /// Runs `f` as a checkpointed block: its intermediate activations are not
    /// recorded on this tape; backward re-runs `f` to reconstruct them.
    ///
    /// Under [`CheckpointPolicy::BlockInputsAndLinear`] the outputs of
    /// matmuls inside the block are kept and fed back during the replay.
    pub fn checkpoint<F>(
        &mut self,
        inputs: &[TensorId],
        policy: CheckpointPolicy,
        f: F,
    ) -> Result<TensorId>
    where
        F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId> + 'static,
    {
        self.check_open()?;
        let mut scratch = Tape::new();
        if policy == CheckpointPolicy::BlockInputsAndLinear {
            scratch.matmul_tap = MatmulTap::Capture(Vec::new());
        }
        let mut scratch_ids = Vec::with_capacity(inputs.len());
        for &inp in inputs {
            let t = self.detach(inp);
            scratch_ids.push(scratch.leaf(&t, false)?);
        }
        let out_id = f(&mut scratch, &scratch_ids)?;
        let out_shape = scratch.shape(out_id).to_vec();
        let mut out_data = alloc_f32(scratch.data(out_id).len());
        out_data.copy_from_slice(scratch.data(out_id));
        let saved_matmuls = match scratch.matmul_tap {
            MatmulTap::Capture(saved) => Some(saved),
            _ => None,
        };
        let req = inputs.iter().any(|&i| self.needs(i));
        let node = Node::Checkpoint(CheckpointNode {
            inputs: inputs.to_vec(),
            replay: Box::new(f),
            saved_matmuls,
        });
        Ok(self.push(out_shape, out_data, node, req))
    }

    // -- backward -----------------------------------------------------------

    /// Backpropagates from a scalar loss, populating the gradient of every
    /// tensor on the tape that requires one, then freezes the tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.check_open()?;
        let t = &self.tensors[loss.index()];
        if t.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: t.shape().to_vec() });
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Backpropagates an arbitrary seed gradient from `root`. Used by the
    /// checkpoint replay; also freezes the tape.
    fn backward_seeded(&mut self, root: TensorId, seed: Vec<f32>) -> Result<()> {
        self.check_open()?;
        self.frozen = true;
        if !self.needs(root) {
            return Ok(());
        }
        self.tensors[root.index()].accumulate_grad(&seed)?;
        for i in (0..self.nodes.len()).rev() {
            let Some(upstream) = self.tensors[i].grad_slot().take() else {
                continue;
            };
            let node = std::mem::replace(&mut self.nodes[i], Node::Leaf);
            let res = self.backward_node(i, &upstream, &node);
            self.nodes[i] = node;
            *self.tensors[i].grad_slot() = Some(upstream);
            res?;
        }
        Ok(())
    }

    fn add_grad(&mut self, id: TensorId, contrib: &[f32]) -> Result<()> {
        if self.needs(id) {
            self.tensors[id.index()].accumulate_grad(contrib)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, out: usize, upstream: &[f32], node: &Node) -> Result<()> {
        match node {
            Node::Leaf => {}
            Node::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let da = mm_nt(upstream, self.data(*b), m, n, k);
                    self.add_grad(*a, &da)?;
                }
                if self.needs(*b) {
                    let db = mm_tn(self.data(*a), upstream, m, k, n);
                    self.add_grad(*b, &db)?;
                }
            }
            Node::Add { a, b } => {
                self.add_grad(*a, upstream)?;
                self.add_grad(*b, upstream)?;
            }
            Node::AddBias { x, bias } => {
                self.add_grad(*x, upstream)?;
                if self.needs(*bias) {
                    let d = self.shape(*bias)[0];
                    let mut db = alloc_f32(d);
                    for row in upstream.chunks(d) {
                        for (o, &g) in db.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    self.add_grad(*bias, &db)?;
                }
            }
            Node::Mul { a, b } => {
                if self.needs(*a) {
                    let mut da = alloc_f32(upstream.len());
                    for ((o, &g), &bv) in da.iter_mut().zip(upstream).zip(self.data(*b)) {
                        *o = g * bv;
                    }
                    self.add_grad(*a, &da)?;
                }
                if self.needs(*b) {
                    let mut db = alloc_f32(upstream.len());
                    for ((o, &g), &av) in db.iter_mut().zip(upstream).zip(self.data(*a)) {
                        *o = g * av;
                    }
                    self.add_grad(*b, &db)?;
                }
            }
            Node::Scale { x, c } => {
                let mut dx = alloc_f32(upstream.len());
                for (o, &g) in dx.iter_mut().zip(upstream) {
                    *o = c * g;
                }
                self.add_grad(*x, &dx)?;
            }
            Node::Silu { x } => {
                let mut dx = alloc_f32(upstream.len());
                for ((o, &g), &xv) in dx.iter_mut().zip(upstream).zip(self.data(*x)) {
                    let s = sigmoid(xv);
                    *o = g * (s * (1.0 + xv * (1.0 - s)));
                }
                self.add_grad(*x, &dx)?;
            }
            Node::SoftmaxRows { x } => {
                let m = self.shape(*x)[1];
                let yd = self.tensors[out].data();
                let mut dx = alloc_f32(upstream.len());
                for ((row_dx, row_y), row_g) in
                    dx.chunks_mut(m).zip(yd.chunks(m)).zip(upstream.chunks(m))
                {
                    let inner: f32 = row_y.iter().zip(row_g).map(|(&y, &g)| y * g).sum();
                    for ((o, &y), &g) in row_dx.iter_mut().zip(row_y).zip(row_g) {
                        *o = y * (g - inner);
                    }
                }
                self.add_grad(*x, &dx)?;
            }
            Node::CrossEntropy { logits, targets, ignore_index, n_valid } => {
                let vocab = self.shape(*logits)[1];
                let g = upstream[0] / *n_valid as f32;
                let ld = self.data(*logits);
                let mut dl = alloc_f32(ld.len());
                for ((row_dl, row_l), &t) in
                    dl.chunks_mut(vocab).zip(ld.chunks(vocab)).zip(targets)
                {
                    if t == *ignore_index {
                        continue;
                    }
                    softmax_into(row_l, row_dl);
                    for p in row_dl.iter_mut() {
                        *p *= g;
                    }
                    row_dl[t as usize] -= g;
                }
                self.add_grad(*logits, &dl)?;
            }
            Node::Embedding { table, ids } => {
                if self.needs(*table) {
                    let dim = self.shape(*table)[1];
                    let mut dt = alloc_f32(self.data(*table).len());
                    for (row_g, &id) in upstream.chunks(dim).zip(ids) {
                        let dst = &mut dt[id as usize * dim..(id as usize + 1) * dim];
                        for (o, &g) in dst.iter_mut().zip(row_g) {
                            *o += g;
                        }
                    }
                    self.add_grad(*table, &dt)?;
                }
            }
            Node::Reshape { x } => {
                self.add_grad(*x, upstream)?;
            }
            Node::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = alloc_f32(r * c);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = upstream[j * r + i];
                    }
                }
                self.add_grad(*x, &dx)?;
            }
            Node::Concat { parts, axis } => {
                let osh = self.tensors[out].shape().to_vec();
                let outer: usize = osh[..*axis].iter().product();
                let inner: usize = osh[*axis + 1..].iter().product();
                let axis_total = osh[*axis];
                let mut base = 0usize;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if self.needs(p) {
                        let block = ext * inner;
                        let mut dp = alloc_f32(outer * block);
                        for o in 0..outer {
                            let src_start = o * axis_total * inner + base * inner;
                            dp[o * block..(o + 1) * block]
                                .copy_from_slice(&upstream[src_start..src_start + block]);
                        }
                        self.add_grad(p, &dp)?;
                    }
                    base += ext;
                }
            }
            Node::Sum { x } => {
                let mut dx = alloc_f32(self.data(*x).len());
                dx.fill(upstream[0]);
                self.add_grad(*x, &dx)?;
            }
            Node::Mean { x } => {
                let n = self.data(*x).len();
                let mut dx = alloc_f32(n);
                dx.fill(upstream[0] / n as f32);
                self.add_grad(*x, &dx)?;
            }
            Node::RmsNorm { x, gain, inv_rms } => {
                let d = *self.shape(*x).last().unwrap();
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let dx = if self.needs(*x) {
                    let mut dx = alloc_f32(xd.len());
                    for ((row_dx, row_x), (row_g, &r)) in dx
                        .chunks_mut(d)
                        .zip(xd.chunks(d))
                        .zip(upstream.chunks(d).zip(inv_rms))
                    {
                        let inner: f32 = row_g
                            .iter()
                            .zip(row_x)
                            .zip(gd)
                            .map(|((&g, &xv), &gv)| g * gv * xv)
                            .sum();
                        let r3_over_d = r * r * r / d as f32;
                        for (((o, &g), &xv), &gv) in
                            row_dx.iter_mut().zip(row_g).zip(row_x).zip(gd)
                        {
                            *o = r * g * gv - r3_over_d * xv * inner;
                        }
                    }
                    Some(dx)
                } else {
                    None
                };
                let dg = if self.needs(*gain) {
                    let mut dg = alloc_f32(d);
                    for ((row_g, row_x), &r) in upstream.chunks(d).zip(xd.chunks(d)).zip(inv_rms) {
                        for ((o, &g), &xv) in dg.iter_mut().zip(row_g).zip(row_x) {
                            *o += g * xv * r;
                        }
                    }
                    Some(dg)
                } else {
                    None
                };
                if let Some(dx) = dx {
                    self.add_grad(*x, &dx)?;
                }
                if let Some(dg) = dg {
                    self.add_grad(*gain, &dg)?;
                }
            }
            Node::Rope { x, positions, base } => {
                let sh = self.shape(*x);
                let (seq, heads, hd) = (sh[0], sh[1], sh[2]);
                let mut dx = alloc_f32(upstream.len());
                apply_rope(upstream, &mut dx, seq, heads, hd, positions, *base, true);
                self.add_grad(*x, &dx)?;
            }
            Node::AttnNaive { q, k, v, q_offset, probs } => {
                self.attention_backward(*q, *k, *v, *q_offset, upstream, Some(probs), None)?;
            }
            Node::AttnStream { q, k, v, q_offset, row_max, row_denom } => {
                self.attention_backward(
                    *q,
                    *k,
                    *v,
                    *q_offset,
                    upstream,
                    None,
                    Some((row_max, row_denom)),
                )?;
            }
            Node::Checkpoint(cp) => {
                let mut inner = Tape::new();
                if let Some(saved) = &cp.saved_matmuls {
                    inner.matmul_tap = MatmulTap::Feed(saved.iter().cloned().collect());
                }
                let mut leaf_ids = Vec::with_capacity(cp.inputs.len());
                for &inp in &cp.inputs {
                    let t = self.detach(inp);
                    leaf_ids.push(inner.leaf(&t, true)?);
                }
                let out_id = (cp.replay)(&mut inner, &leaf_ids)?;
                if inner.data(out_id).len() != upstream.len() {
                    return Err(Error::Input(
                        "checkpoint replay produced an output of a different size".into(),
                    ));
                }
                inner.backward_seeded(out_id, upstream.to_vec())?;
                for (&inp, &leaf) in cp.inputs.iter().zip(&leaf_ids) {
                    if let Some(g) = inner.grad(leaf) {
                        self.add_grad(inp, &g.to_vec())?;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        q_offset: usize,
        upstream: &[f32],
        probs: Option<&[f32]>,
        stats: Option<(&[f32], &[f32])>,
    ) -> Result<()> {
        let qsh = self.shape(q).to_vec();
        let (sq, heads, hd) = (qsh[0], qsh[1], qsh[2]);
        let kv = self.shape(k)[0];
        let scale = 1.0 / (hd as f32).sqrt();
        let qd = self.data(q).to_vec();
        let kd = self.data(k).to_vec();
        let vd = self.data(v).to_vec();
        let mut dq = alloc_f32(qd.len());
        let mut dk = alloc_f32(kd.len());
        let mut dv = alloc_f32(vd.len());
        for i in 0..sq {
            let visible = i + q_offset + 1;
            for h in 0..heads {
                let qrow = &qd[(i * heads + h) * hd..(i * heads + h + 1) * hd];
                let grow = &upstream[(i * heads + h) * hd..(i * heads + h + 1) * hd];
                // Correction term: sum_j p_j * (dOut . v_j), accumulated in a
                // first sweep so masked entries never participate.
                let mut corr = 0.0f32;
                let weight_at = |j: usize| -> f32 {
                    match (probs, stats) {
                        (Some(p), _) => p[(i * heads + h) * kv + j],
                        (None, Some((rm, rd))) => {
                            let krow = &kd[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                            let s = dot(qrow, krow) * scale;
                            (s - rm[i * heads + h]).exp() / rd[i * heads + h]
                        }
                        _ => unreachable!("attention node stores probs or stats"),
                    }
                };
                for j in 0..visible {
                    let vrow = &vd[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                    corr += weight_at(j) * dot(grow, vrow);
                }
                for j in 0..visible {
                    let w = weight_at(j);
                    let vrow = &vd[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                    let ds = w * (dot(grow, vrow) - corr);
                    let krow = &kd[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                    let dqrow = &mut dq[(i * heads + h) * hd..(i * heads + h + 1) * hd];
                    for (o, &kval) in dqrow.iter_mut().zip(krow) {
                        *o += ds * scale * kval;
                    }
                    let dkrow = &mut dk[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                    for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                        *o += ds * scale * qv;
                    }
                    let dvrow = &mut dv[(j * heads + h) * hd..(j * heads + h + 1) * hd];
                    for (o, &g) in dvrow.iter_mut().zip(grow) {
                        *o += w * g;
                    }
                }
            }
        }
        self.add_grad(q, &dq)?;
        self.add_grad(k, &dk)?;
        self.add_grad(v, &dv)?;
        Ok(())
    }
}

// -- kernel helpers ---------------------------------------------------------

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Stable softmax of `row` written into `out` (same length).
fn softmax_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// C[m,n] = A[m,k] * B[k,n].
fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = alloc_f32(m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] * B[k,n]^T.
fn mm_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut c = alloc_f32(m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            c[i * k + j] = dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n].
fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = alloc_f32(k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[t * n..(t + 1) * n];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    c
}

/// Rotary transform of `[seq, heads, hd]` data; `invert` applies the
/// transpose rotation (used by the backward pass).
#[allow(clippy::too_many_arguments)]
fn apply_rope(
    src: &[f32],
    dst: &mut [f32],
    seq: usize,
    heads: usize,
    hd: usize,
    positions: &[usize],
    base: f32,
    invert: bool,
) {
    let half = hd / 2;
    for i in 0..seq {
        let pos = positions[i] as f64;
        for h in 0..heads {
            let off = (i * heads + h) * hd;
            for t in 0..half {
                let theta = (base as f64).powf(-2.0 * t as f64 / hd as f64);
                let angle = pos * theta;
                let (sin, cos) = angle.sin_cos();
                let (sin, cos) = (sin as f32, cos as f32);
                let x0 = src[off + 2 * t];
                let x1 = src[off + 2 * t + 1];
                if invert {
                    dst[off + 2 * t] = x0 * cos + x1 * sin;
                    dst[off + 2 * t + 1] = -x0 * sin + x1 * cos;
                } else {
                    dst[off + 2 * t] = x0 * cos - x1 * sin;
                    dst[off + 2 * t + 1] = x0 * sin + x1 * cos;
                }
            }
        }
    }
}

/// Rotation of one dimension pair by an explicit angle. Exposed for the unit
/// tests of the rotary formula.
pub fn rotate_pair(x0: f32, x1: f32, angle: f64) -> (f32, f32) {
    let (sin, cos) = angle.sin_cos();
    let (sin, cos) = (sin as f32, cos as f32);
    (x0 * cos - x1 * sin, x0 * sin + x1 * cos)
}
