//! Dense row-major f32 tensors and the reverse-mode tape that records
//! operations over them.

mod tape;

pub use tape::{rotate_pair, AttentionMode, CheckpointPolicy, Tape, TensorId};

use crate::error::{Error, Result};
use std::cell::Cell;

/// Dense n-dimensional array of f32 values in row-major order, with an
/// optional gradient slot of the same shape.
///
/// A `Tensor` outside a [`Tape`] is a plain value: immutable through the
/// public API and safe to share across threads. Copies placed on a tape get
/// their `tape_id` set and live for the duration of that tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    tape_id: Option<TensorId>,
}

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                detail: "extents must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                detail: format!("shape implies {} elements, data has {}", numel, data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            tape_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, alloc_f32(numel))
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar shape is valid")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Scalar payload; the tensor must hold exactly one element.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::InvalidShape {
                op: "accumulate_grad",
                shape: self.shape.clone(),
                detail: format!("gradient has {} elements", delta.len()),
            });
        }
        let grad = self
            .grad
            .get_or_insert_with(|| alloc_f32(self.data.len()));
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Clears the gradient slot.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn tape_id(&self) -> Option<TensorId> {
        self.tape_id
    }

    pub(crate) fn set_tape_id(&mut self, id: TensorId) {
        self.tape_id = Some(id);
    }

    pub(crate) fn data_mut(&mut self) -> &mut Vec<f32> {
        &mut self.data
    }

    pub(crate) fn grad_slot(&mut self) -> &mut Option<Vec<f32>> {
        &mut self.grad
    }

    pub(crate) fn set_requires_grad_raw(&mut self, on: bool) {
        self.requires_grad = on;
    }

    /// In-place elementwise update used by the optimizer. Only meaningful for
    /// detached tensors (model parameters).
    pub fn update_data(&mut self, f: impl FnMut(&mut f32)) {
        self.data.iter_mut().for_each(f);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Allocation accounting.
//
// Every f32 buffer the kernels create goes through `alloc_f32`, so tests can
// assert bounds on scratch usage (in particular that the streaming attention
// path never materializes a seq x seq matrix).

thread_local! {
    static TRACKING: Cell<bool> = const { Cell::new(false) };
    static MAX_SINGLE: Cell<usize> = const { Cell::new(0) };
    static TOTAL: Cell<usize> = const { Cell::new(0) };
    static COUNT: Cell<usize> = const { Cell::new(0) };
}

/// Allocation totals observed by [`with_alloc_tracking`], in f32 elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocStats {
    /// Largest single buffer allocated.
    pub max_single: usize,
    /// Sum of all buffer sizes.
    pub total: usize,
    /// Number of buffers allocated.
    pub count: usize,
}

/// Allocates a zeroed f32 buffer, recording it when tracking is active.
pub(crate) fn alloc_f32(len: usize) -> Vec<f32> {
    TRACKING.with(|t| {
        if t.get() {
            MAX_SINGLE.with(|m| m.set(m.get().max(len)));
            TOTAL.with(|m| m.set(m.get() + len));
            COUNT.with(|m| m.set(m.get() + 1));
        }
    });
    vec![0.0; len]
}

/// Runs `f` with allocation accounting enabled on this thread and reports
/// what the kernels allocated.
pub fn with_alloc_tracking<T>(f: impl FnOnce() -> T) -> (T, AllocStats) {
    TRACKING.with(|t| t.set(true));
    MAX_SINGLE.with(|m| m.set(0));
    TOTAL.with(|m| m.set(0));
    COUNT.with(|m| m.set(0));
    let out = f();
    TRACKING.with(|t| t.set(false));
    let stats = AllocStats {
        max_single: MAX_SINGLE.with(|m| m.get()),
        total: TOTAL.with(|m| m.get()),
        count: COUNT.with(|m| m.get()),
    };
    (out, stats)
}
