//! Dense f64 tensors and reverse-mode differentiation.
//!
//! [`Tensor`] is the universal value type: activations, parameters and
//! gradients are all flat row-major f64 buffers with shape metadata.
//! Differentiable computation goes through a [`Tape`], which records every
//! operation and replays them in reverse for gradients.

mod gradcheck;
mod tape;

pub use gradcheck::finite_diff_check;
pub use tape::{BnBatchStats, Padding, Tape, Var};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::rng::Rng;

/// Forward-pass mode. Train mode uses batch statistics in batch norm and
/// reports statistics for running-average updates; eval mode uses the stored
/// running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Operand shapes do not satisfy the operation's contract.
    Shape { op: &'static str, detail: String },
    /// A non-shape precondition was violated (bad label, empty set, ...).
    Invalid { op: &'static str, detail: String },
    /// An operation produced a NaN or infinity.
    NonFinite { op: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape { op, detail } => write!(f, "{op}: shape error: {detail}"),
            TensorError::Invalid { op, detail } => write!(f, "{op}: {detail}"),
            TensorError::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
        }
    }
}

impl std::error::Error for TensorError {}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        detail: detail.into(),
    }
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Dense n-dimensional array of f64 in row-major order.
///
/// Parameters are tensors with `requires_grad` set; they carry a process-wide
/// unique id so a [`Tape`] can hand gradients back to their owner after
/// `backward`.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    param_id: Option<u64>,
}

impl Tensor {
    /// Build a tensor from a shape and matching flat data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", format!("zero dimension in {shape:?}")));
        }
        if data.len() != numel {
            return Err(shape_err(
                "tensor",
                format!("data length {} != product of {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            param_id: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
            param_id: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
            param_id: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(&[1], value)
    }

    /// Uniform values in [lo, hi) from the given generator.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            param_id: None,
        }
    }

    /// Mark this tensor as a trainable parameter: gradients will be
    /// collected for it and it receives a unique parameter id.
    pub fn into_parameter(mut self) -> Self {
        self.requires_grad = true;
        self.param_id = Some(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed));
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn param_id(&self) -> Option<u64> {
        self.param_id
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Add `delta` into the stored gradient, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bound {dim} at axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Max absolute difference against another tensor of identical shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
