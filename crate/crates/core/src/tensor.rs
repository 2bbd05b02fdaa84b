//! Dense row-major tensors.
//!
//! A [`Tensor`] is a shape plus a flat `Vec` of scalars. It carries no
//! gradient machinery of its own; differentiation happens on a
//! [`crate::tape::Tape`], which stores tensors at each node. The methods here
//! are the non-differentiated building blocks: elementwise arithmetic used by
//! attack update rules, `sign`, and the epsilon-ball projection
//! `clamp_project`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
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

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self + c * other`, the attack update step.
    pub fn add_scaled(&self, c: T, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + c * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| c * v)
    }

    /// Elementwise sign with `sign(0) = 0`.
    ///
    /// This is the saturating direction used by FGSM-style steps, not IEEE
    /// `signum` (which maps +0 to 1).
    pub fn sign(&self) -> Self {
        self.map(|v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Project elementwise into the L-inf ball of radius `eps` around
    /// `center`, then into `[lo, hi]` when a clamp range is given.
    ///
    /// Idempotent: projecting an already-projected tensor is the identity.
    /// With `eps = 0` the result is exactly the (clipped) center.
    pub fn clamp_project(&self, center: &Self, eps: T, range: Option<(T, T)>) -> Result<Self> {
        if eps < T::zero() {
            return Err(Error::InvalidArgument(format!("negative ball radius {eps}")));
        }
        if let Some((lo, hi)) = range {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("clamp range [{lo}, {hi}] is empty")));
            }
        }
        self.zip_map(center, |x, c| {
            let mut v = x;
            if v > c + eps {
                v = c + eps;
            }
            if v < c - eps {
                v = c - eps;
            }
            if let Some((lo, hi)) = range {
                if v < lo {
                    v = lo;
                }
                if v > hi {
                    v = hi;
                }
            }
            v
        })
    }

    pub fn linf_dist(&self, other: &Self) -> Result<T> {
        let d = self.sub(other)?;
        Ok(d.data.iter().fold(T::zero(), |m, &v| m.max(v.abs())))
    }

    pub fn l2_dist(&self, other: &Self) -> Result<T> {
        let d = self.sub(other)?;
        Ok(d.data.iter().fold(T::zero(), |s, &v| s + v * v).sqrt())
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &v| s + v * v).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the maximum element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Lossless precision conversion through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Numerically stable softmax of a slice: the max is subtracted before
/// exponentiation, so arbitrarily shifted logits give the same result.
pub fn softmax_slice<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
    let mut out: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum = out.iter().fold(T::zero(), |a, &b| a + b);
    for v in &mut out {
        *v = *v / sum;
    }
    out
}
