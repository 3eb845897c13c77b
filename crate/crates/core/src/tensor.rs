//! Dense row-major tensors.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{dim_err, Result};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar: Float + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.contains(&0) && !data.is_empty() {
            return Err(dim_err!("shape {shape:?} has a zero extent"));
        }
        if numel != data.len() {
            return Err(dim_err!("shape {shape:?} needs {numel} elements, got {}", data.len()));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is known to match the data length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_f64_slice(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at a multi-index. Panics when the index is out of range.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        off
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, v| if v > m { v } else { m })
    }

    /// Expects an NCHW tensor; returns `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(dim_err!("expected a 4-d NCHW tensor, got {:?}", self.shape)),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}{:?}", self.shape, &self.data[..self.data.len().min(PREVIEW)])?;
        if self.data.len() > PREVIEW {
            write!(f, "..")?;
        }
        Ok(())
    }
}
