//! Dense row-major tensors.
//!
//! Values are immutable once built; clones share storage. All construction
//! paths enforce positive extents and `product(dims) == data.len()`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("extents must be positive, got {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {:?} imply {} elements, got {}", dims, numel, data.len()),
            ));
        }
        Ok(Tensor { dims: dims.to_vec(), data: Arc::new(data) })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        Self::from_vec(dims, vec![S::zero(); numel])
    }

    pub fn filled(dims: &[usize], v: S) -> Result<Self> {
        let numel: usize = dims.iter().product();
        Self::from_vec(dims, vec![v; numel])
    }

    pub fn scalar(v: S) -> Self {
        Tensor { dims: vec![1], data: Arc::new(vec![v]) }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> S) -> Result<Self> {
        let numel: usize = dims.iter().product();
        Self::from_vec(dims, (0..numel).map(|i| f(i)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Same storage, new extents. Element count must be preserved.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", format!("extents must be positive, got {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} ({} elems) as {:?}", self.dims, self.numel(), dims),
            ));
        }
        Ok(Tensor { dims: dims.to_vec(), data: Arc::clone(&self.data) })
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("expected scalar tensor, dims {:?}", self.dims)));
        }
        Ok(self.data[0])
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[i * self.dims[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Map into a different scalar type (f32 <-> f64 movement at I/O edges).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|v| T::from_f32c(v.to_f32c())).collect();
        Tensor { dims: self.dims.clone(), data: Arc::new(data) }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor { dims: self.dims.clone(), data: Arc::new(data) }
    }

    /// Exact elementwise equality (bit-level for floats with equal sign/payload).
    pub fn bit_eq(&self, other: &Tensor<S>) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.total_order(b) == std::cmp::Ordering::Equal)
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        debug_assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), |m, d| if d > m { d } else { m })
    }
}
