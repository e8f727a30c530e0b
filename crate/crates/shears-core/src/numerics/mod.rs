//! Dense 32-bit tensors and reverse-mode automatic differentiation.
//!
//! Everything here is deliberately small: row-major `f32` storage, eager
//! shape validation, a tape-style [`graph::Graph`] recording the primitive
//! ops a toy transformer needs, and a finite-difference checker
//! ([`gradcheck`]) used by the test suites as an independent oracle.

use std::fmt;
use std::sync::Arc;
use thiserror::Error;

pub mod gradcheck;
pub mod graph;
pub mod ops;

pub type NumResult<T> = Result<T, NumericsError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("tensor data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("tensor shapes must have positive dimensions, got {shape:?}")]
    ZeroDim { shape: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("cross entropy over an all-padding target batch")]
    DegenerateBatch,
    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("{op}: slice [{start}, {start}+{len}) out of bounds for axis of {bound}")]
    SliceOutOfBounds {
        op: &'static str,
        start: usize,
        len: usize,
        bound: usize,
    },
}

/// An immutable row-major tensor of finite `f32` values.
///
/// The data buffer is shared (`Arc`), so cloning a tensor or keeping it
/// alive on an autodiff tape is cheap. Construction validates that the
/// shape is positive, the buffer length matches, and every value is finite;
/// no constructor lets a NaN/Inf sneak in silently.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> NumResult<Self> {
        Self::with_op_name(shape, data, "tensor")
    }

    /// Like [`Tensor::new`] but attributes finiteness failures to `op`.
    pub fn with_op_name(shape: Vec<usize>, data: Vec<f32>, op: &'static str) -> NumResult<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::ZeroDim { shape });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::DataLength {
                shape,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { op });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> NumResult<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f32) -> NumResult<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f32) -> NumResult<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> NumResult<f32> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(NumericsError::BadShape {
                op: "item",
                expected: "scalar",
                got: self.shape.clone(),
            })
        }
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> NumResult<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(NumericsError::BadShape {
                op,
                expected: "2-D tensor",
                got: self.shape.clone(),
            }),
        }
    }

    /// Mutable view of the buffer; clones it first if other handles exist.
    /// Used by optimizers — evaluation code never mutates tensors.
    pub fn make_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Replaces the buffer contents, re-validating finiteness.
    pub fn try_update(&mut self, f: impl FnOnce(&mut [f32])) -> NumResult<()> {
        f(Arc::make_mut(&mut self.data).as_mut_slice());
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "update" });
        }
        Ok(())
    }

    /// True when both tensors have identical shape and bit-identical data.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())
        } else {
            write!(f, " [{} values]", self.numel())
        }
    }
}
