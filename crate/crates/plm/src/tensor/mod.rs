//! Dense tensors and reverse-mode autodiff on a Wengert tape.
//!
//! The element type is generic: production code instantiates `f32`, while
//! gradient-check oracles instantiate `f64` so that finite-difference noise
//! stays far below the tolerance being asserted. Both instantiations run the
//! exact same forward and backward code paths.

mod check;
mod kernels;
mod tape;

pub use check::{grad_check, op_suite};
pub use tape::{sigmoid, Tape, TensorId};

use crate::error::{Error, Result};

/// Floating-point element type for tensors and tapes.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Copy + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Gaussian error linear unit, tanh approximation:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

/// Derivative of [`gelu`] with respect to its input.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// A dense row-major tensor. `dims` may have any rank; scalars use `[1]`.
/// The optional gradient buffer is populated by training code after a
/// backward pass and consumed by the optimizer.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.is_empty() || numel != data.len() {
            return Err(Error::Shape {
                op: "tensor_new",
                details: format!("dims {:?} imply {} elements, got {}", dims, numel, data.len()),
            });
        }
        Ok(Tensor { dims, data, requires_grad: false, grad: None })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel: usize = dims.iter().product();
        Tensor { dims, data: vec![T::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn filled(dims: Vec<usize>, value: T) -> Self {
        let numel: usize = dims.iter().product();
        Tensor { dims, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { dims: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    /// Fan-out during backward accumulates rather than overwrites.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Converts element type, used to lift f32 parameters into f64 oracles.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_dims() {
        let err = Tensor::new(vec![2, 3], vec![0.0f32; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn scalar_is_rank_one() {
        let t = Tensor::scalar(3.5f32);
        assert_eq!(t.dims(), &[1]);
        assert_eq!(t.data(), &[3.5]);
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut t = Tensor::zeros(vec![3]);
        t.accumulate_grad(&[1.0f32, 2.0, 3.0]);
        t.accumulate_grad(&[10.0, 20.0, 30.0]);
        assert_eq!(t.grad().unwrap(), &[11.0, 22.0, 33.0]);
    }

    #[test]
    fn gelu_matches_reference_points() {
        // Reference values computed directly from the tanh formula in f64.
        assert!((gelu(0.0f64)).abs() < 1e-15);
        assert!((gelu(1.0f64) - 0.841_191_990_607_477_5).abs() < 1e-12);
        assert!((gelu(-1.0f64) + 0.158_808_009_392_522_47).abs() < 1e-12);
        // Large inputs saturate to identity / zero.
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-9);
        assert!(gelu(-10.0f64).abs() < 1e-9);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -1.0, -0.5, 0.0, 0.5, 1.0, 3.0] {
            let eps = 1e-6;
            let numeric = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_grad(x) - numeric).abs() < 1e-8, "x = {x}");
        }
    }
}
