//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The numeric substrate for the whole crate: a plain value type
//! ([`Tensor`]), a recording [`Tape`](tape::Tape) of primitive
//! applications with exact backward rules, and a finite-difference
//! harness ([`gradcheck`]) that checks every tape gradient against
//! central differences.
//!
//! Training normally runs at `f32`; every verification path (gradient
//! checks, contribution analysis) can run the same code at `f64` by
//! instantiating the generic scalar parameter.

mod scalar;
pub mod tape;

pub mod gradcheck;

pub use scalar::{Dtype, Real};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major.
///
/// Immutable once built; gradients live on the tape, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape implies {n} elements, data has {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::ZERO; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as 2-D (leading extent).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent; the normalized/model dimension for 2-D tensors.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at(&self, row: usize, col: usize) -> F {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.cols() + col]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossless precision change (f32 -> f64) or rounding (f64 -> f32).
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }
}

/// Shared check for elementwise binary ops.
pub(crate) fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}
