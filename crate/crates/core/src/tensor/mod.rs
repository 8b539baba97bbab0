//! Dense tensors with reverse-mode automatic differentiation and Adam.
//!
//! The computation graph is a per-step tape: forward calls on [`Tape`] record
//! nodes, [`Tape::backward`] fills gradients in one reverse sweep, and the
//! tape is dropped afterwards. Precision is a type parameter ([`Scalar`] is
//! implemented by `f32` and `f64`).

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod tape;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PopError, Result};
use crate::scalar::Scalar;
pub use adam::{AdamConfig, AdamState};
pub use tape::{NodeId, Tape};

/// Dense multi-dimensional array. `grad` is populated by gradient harvesting
/// after a backward pass; tensors with `requires_grad == false` never receive
/// one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(PopError::invalid(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// Truncated-normal init: N(0, std²) with redraws outside ±2 std.
    pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f64, std).expect("valid std");
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = dist.sample(rng);
            while v.abs() > 2.0 * std {
                v = dist.sample(rng);
            }
            data.push(T::from_f64(v));
        }
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Replace contents wholesale (used by head expansion).
    pub fn reset(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<()> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(PopError::invalid(format!(
                "tensor reset shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        self.shape = shape;
        self.data = data;
        self.grad = None;
        Ok(())
    }
}
