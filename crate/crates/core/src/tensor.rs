//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a value: it never changes after construction, and every
//! operation in [`crate::autodiff`] produces a fresh one. Four-dimensional
//! tensors follow the `[batch, channels, height, width]` layout.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..len).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => Err(Error::Shape(format!("expected a 4-D tensor [N,C,H,W], got shape {s:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[a, b] => Ok([a, b]),
            s => Err(Error::Shape(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, hs, ws] = self.dims4().expect("at4 on non 4-D tensor");
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Copy of one batch item and one channel as a row-major `H*W` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let [_, cs, h, w] = self.dims4().expect("plane on non 4-D tensor");
        let start = (n * cs + c) * h * w;
        &self.data[start..start + h * w]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
