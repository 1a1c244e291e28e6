//! Dense tensors, a tape-based reverse-mode autodiff graph and the Adam optimizer.
//!
//! Values live in [`Tensor`] (row-major, owned). Parameters live in a
//! [`ParamStore`] outside of any graph; a [`Graph`] borrows them for one
//! forward/backward pass, so a training step is:
//!
//! 1. build a `Graph` over `&store`, record the forward pass,
//! 2. `graph.backward(loss)` to get per-parameter gradients,
//! 3. drop the graph and hand the gradients to [`Adam::step`] with `&mut store`.

mod adam;
mod graph;
mod kernels;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamGrads, ParamId, ParamStore};

/// Floating point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn erf(self) -> Self;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Rank-0 shapes (`[]`) hold a single scalar. Zero-sized dimensions are rejected.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} elements, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let data = vec![value; numel(&shape)];
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}
