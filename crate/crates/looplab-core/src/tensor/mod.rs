//! Dense double-precision tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: 0/1/2-dimensional tensors, sequential
//! (fixed-order) reductions so repeated runs are bit-reproducible, and exactly
//! the operation set the looped architectures need. Every forward op checks
//! its output for NaN/Inf and surfaces non-finite values as errors instead of
//! storing them.

mod graph;
pub mod gradcheck;
#[cfg(test)]
mod op_tests;

pub use graph::{FlopCount, Graph, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("backward already ran on this graph; rebuild it to differentiate again")]
    BackwardReentry,
    #[error("token id {id} out of vocabulary range {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense tensor of f64 scalars. Scalars have an empty shape; matrices are
/// row-major. Values are immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                details: format!("shape {:?} holds {} values, got {}", shape, numel, data.len()),
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn scalar(x: f64) -> Self {
        Self::new(vec![], vec![x]).expect("finite scalar")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![1.0; numel], requires_grad: false }
    }

    /// Marks the tensor as a differentiable leaf when bound into a graph.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.numel() == 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Rows of a matrix (1 for a vector treated as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Length of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Frobenius norm (plain Euclidean norm for vectors).
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Mean cross-entropy of fixed logits against target ids, as a plain value.
pub fn cross_entropy_value(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, targets)?;
    Ok(g.value(ce).item())
}

/// Row-major matmul on raw slices; ikj loop order for cache friendliness.
/// Shared by the graph ops and by value-level oracles.
pub(crate) fn matmul_slices(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}
