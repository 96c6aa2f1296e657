//! Dense tensors and a recorded reverse-mode differentiation graph.
//!
//! Tensors are immutable row-major buffers. Image batches use the
//! `batch × height × width × channels` layout throughout.

mod conv;
pub mod gradcheck;
mod graph;
mod wide;

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::{ConvGeometry, Padding};
pub use graph::{GradientMap, Graph, NodeId, OpKind};
pub use wide::Wide;

/// Floating point element type. Training runs on `f32`, verification on `f64`.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `e^x` as used by graph operations.
    #[inline]
    fn natural_exp(self) -> Self {
        self.exp()
    }

    /// `ln x` as used by graph operations.
    #[inline]
    fn natural_log(self) -> Self {
        self.ln()
    }

    /// `self / rhs` as used by graph operations.
    #[inline]
    fn quotient(self, rhs: Self) -> Self {
        self / rhs
    }
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}


pub const MAX_RANK: usize = 4;

/// Dimensions of a tensor. Rank 0 denotes a scalar.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.len() > MAX_RANK {
            return Err(Error::contract(format!(
                "rank {} exceeds the supported maximum of {MAX_RANK}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::contract(format!("zero-sized dimension in {dims:?}")));
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn last(&self) -> usize {
        self.0.last().copied().unwrap_or(1)
    }

    /// `(outer, len, inner)` such that the axis is strided by `inner`.
    pub(crate) fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.0[..axis].iter().product();
        let inner = self.0[axis + 1..].iter().product();
        (outer, self.0[axis], inner)
    }

    pub(crate) fn without_axis(&self, axis: usize) -> Shape {
        let mut d = self.0.clone();
        d.remove(axis);
        Shape(d)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "×")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape(shape, data)
    }

    pub fn from_shape(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::contract(format!(
                "shape {shape} holds {} elements but {} values were given",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![v],
        }
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: impl Into<Vec<usize>>, v: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![v; n],
        })
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(&mut f).collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on non-scalar tensor of shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with a numeric fault if any value is NaN or infinite.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(
                op,
                format!("non-finite value {} at flat index {i}", self.data[i]),
            )),
        }
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::contract(format!(
                "dot: shape mismatch {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        let rows = self.dims().first().copied().unwrap_or(1);
        if start >= end || end > rows {
            return Err(Error::contract(format!(
                "row range {start}..{end} out of bounds for {} rows",
                rows
            )));
        }
        let stride = self.numel() / rows;
        let mut dims = self.dims().to_vec();
        dims[0] = end - start;
        Self::new(dims, self.data[start * stride..end * stride].to_vec())
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let rows = self.dims().first().copied().unwrap_or(1);
        let stride = self.numel() / rows;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= rows {
                return Err(Error::contract(format!(
                    "row index {i} out of bounds for {rows} rows"
                )));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut dims = self.dims().to_vec();
        dims[0] = indices.len();
        Self::new(dims, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{} ", self.shape)?;
        let head = &self.data[..self.data.len().min(SHOWN)];
        write!(f, "{head:?}")?;
        if self.data.len() > SHOWN {
            write!(f, " … ({} more)", self.data.len() - SHOWN)?;
        }
        Ok(())
    }
}
