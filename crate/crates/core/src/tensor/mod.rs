//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated. Leaves created with
//! `requires_grad` receive `d root / d leaf` when [`Tape::backward`] is called
//! on a scalar root. Gradients accumulate across calls until cleared.

mod kernels;
mod tape;

pub use tape::{Tape, Var, VarianceKind};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", "zero-sized dimension", &shape, &[]));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape holds {numel} elements but {} values given", values.len()),
                &shape,
                &[values.len()],
            ));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![S::zero(); n]).expect("zeros: consistent shape")
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: consistent shape")
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::of(v)).collect())
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, delta: Option<&[S]>) {
        let n = self.values.len();
        let grad = self.grad.get_or_insert_with(|| vec![S::zero(); n]);
        if let Some(delta) = delta {
            for (g, d) in grad.iter_mut().zip(delta) {
                *g += *d;
            }
        }
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<S> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.values
                .iter()
                .zip(&other.values)
                .fold(S::zero(), |m, (a, b)| m.max((*a - *b).abs())),
        )
    }
}
