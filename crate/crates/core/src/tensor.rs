use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::CounterRng;

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: Vec::new(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
            requires_grad: false,
            grad: Vec::new(),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: Vec::new(),
        }
    }

    /// Samples `Normal(mean, stddev)` from the counter-based stream of `seed`.
    pub fn randn(shape: &[usize], mean: f64, stddev: f64, seed: u64) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::arg("randn needs a non-empty shape"));
        }
        if !(stddev > 0.0) {
            return Err(Error::arg(format!("stddev must be positive, got {stddev}")));
        }
        let mut rng = CounterRng::new(seed);
        let data = rng
            .normals(numel(shape), mean, stddev)
            .into_iter()
            .map(T::from_f64)
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// Turns gradient tracking on or off. Enabling allocates a zeroed grad.
    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        self.grad = if requires_grad {
            vec![T::zero(); self.data.len()]
        } else {
            Vec::new()
        };
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer; empty when gradients are not tracked.
    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::InvalidState("tensor does not track gradients".into()));
        }
        if g.len() != self.grad.len() {
            return Err(Error::shape("gradient length does not match tensor"));
        }
        self.grad.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
        Ok(())
    }

    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [T], &[T]) {
        (&mut self.data, &self.grad)
    }

    /// Element-wise conversion to another precision; gradient tracking is kept,
    /// the gradient buffer is reset.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let mut t = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: false,
            grad: Vec::new(),
        };
        t.set_requires_grad(self.requires_grad);
        t
    }
}
