//! Dense f64 tensor values and the reverse-mode differentiation tape.
//!
//! Everything the encoder and the losses need runs through [`Tape`]: matmul,
//! elementwise arithmetic, softmax, layer normalization, GELU, embedding
//! gather, cross-entropy, cosine similarity, and reductions. Values are
//! row-major 64-bit floats. A [`Tensor`] with no tape attached is plain
//! immutable data and safe to share read-only across threads.

mod tape;

pub use tape::{Op, Tape, TensorId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("degenerate vector: zero norm in cosine similarity")]
    DegenerateVector,
    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("backward on a detached output: no differentiable input feeds it")]
    DetachedGraph,
    #[error("empty selection in {op}")]
    EmptySelection { op: &'static str },
}

/// A dense row-major tensor. `grad`, when present, always matches `data` in
/// length; the all-dimensions product always equals `data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not cover {} values",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn param(data: Vec<f64>, shape: Vec<usize>) -> Self {
        let mut t = Tensor::new(data, shape);
        t.requires_grad = true;
        t
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(vec![0.0; n], shape)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![v], vec![])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Adds `delta` into the persistent gradient buffer, allocating it on
    /// first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Cosine similarity between two equal-length vectors, without a tape.
/// Shared by the differentiable op and the read-only evaluation paths.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, TensorError> {
    assert_eq!(u.len(), v.len(), "cosine over mismatched lengths");
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(TensorError::DegenerateVector);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}
