//! Minimal reverse-mode automatic differentiation on dense tensors.
//!
//! The engine is a dynamic tape: operations execute eagerly on a [`Graph`]
//! which records enough per-node state to replay adjoints in reverse. Model
//! code runs in `f32`; gradient-check tests instantiate the same code in
//! `f64` (the "shadow" mode), so everything is generic over [`Elem`].

mod gradcheck;
mod graph;
mod optim;
mod rng;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use rng::SluRng;

use crate::error::{Error, Result};

/// Scalar element of a tensor: `f32` in training, `f64` in shadow mode.
pub trait Elem:
    Copy
    + Clone
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_nan(self) -> bool;
    fn is_finite(self) -> bool;
    fn neg_infinity() -> Self;
    fn max_elem(self, other: Self) -> Self;
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_nan(self) -> bool {
        f32::is_nan(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn neg_infinity() -> Self {
        f32::NEG_INFINITY
    }
    fn max_elem(self, other: Self) -> Self {
        f32::max(self, other)
    }
}

impl Elem for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_nan(self) -> bool {
        f64::is_nan(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }
    fn max_elem(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

/// Dense row-major tensor with an optional gradient buffer.
///
/// The gradient buffer is only present after a backward pass has written to
/// it; tensors that do not require gradient never receive one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Elem> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

impl<E: Elem> Tensor<E> {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<E>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    /// Overwrites the gradient buffer. Ignored for non-trainable tensors.
    pub fn set_grad(&mut self, grad: Vec<E>) {
        if self.requires_grad {
            debug_assert_eq!(grad.len(), self.data.len());
            self.grad = Some(grad);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows of a 2-d tensor; errors on other ranks.
    pub fn rows(&self) -> Result<usize> {
        if self.shape.len() != 2 {
            return Err(Error::Contract {
                op: "Tensor::rows",
                msg: format!("expected rank 2, got shape {:?}", self.shape),
            });
        }
        Ok(self.shape[0])
    }

    /// Converts element type, rounding through `f64`.
    pub fn cast<T: Elem>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape_product() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn grad_ignored_without_requires_grad() {
        let mut t = Tensor::<f32>::zeros(vec![2]);
        t.set_grad(vec![1.0, 1.0]);
        assert!(t.grad().is_none());
        let mut t = t.with_requires_grad();
        t.set_grad(vec![1.0, 1.0]);
        assert_eq!(t.grad(), Some(&[1.0f32, 1.0][..]));
    }
}
