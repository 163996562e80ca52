//! Dense f64 tensors and a record-on-execute reverse-mode tape.
//!
//! [`Tensor`] is the value container used everywhere (parameters, latents,
//! waveforms). Differentiable computation happens on a [`Graph`]: values are
//! copied in as leaves, every op appends a node, and [`Graph::backward`] walks
//! the nodes in exact reverse recording order.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, grad_check_at};
pub use graph::{GatePattern, Gradients, Graph, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("axis {axis} has size 0")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} elements but data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: zero-sized axis")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(Vec::new(), vec![value]).unwrap()
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect()).expect("from_fn: zero-sized axis")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient has {} elements, tensor {:?}", g.len(), self.shape),
            ));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape)));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    /// Row `i` of the leading axis as a new tensor.
    /// Contiguous slice of row `i` along axis 0. Panics when out of range.
    pub fn row_data(&self, i: usize) -> &[f64] {
        let inner: usize = self.shape[1..].iter().product();
        &self.data[i * inner..(i + 1) * inner]
    }

    pub fn row(&self, i: usize) -> Result<Tensor> {
        let lead = *self.shape.first().ok_or_else(|| Error::shape("row", "scalar has no rows"))?;
        if i >= lead {
            return Err(Error::shape("row", format!("index {i} out of range for axis 0 of size {lead}")));
        }
        let inner: usize = self.shape[1..].iter().product();
        let rest = if self.shape.len() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Tensor::new(rest, self.data[i * inner..(i + 1) * inner].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}
