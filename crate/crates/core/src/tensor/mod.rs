//! Dense rank-4 tensors, a define-by-run reverse-mode graph over them,
//! and the Adam optimizer.
//!
//! Every image, feature map, cost volume and gradient in the crate is a
//! [`Tensor4`] laid out row-major in `(n, c, h, w)` order. Differentiable
//! computations are recorded on a [`Graph`], which is rebuilt for every
//! forward pass and discarded after [`Graph::backward`].

mod adam;
pub(crate) mod conv;
mod gradcheck;
mod graph;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{CustomOp, Graph, Gradients, Var};

use std::fmt;

use crate::error::{Error, Result};

/// Dense `(n, c, h, w)` array of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: [usize; 4]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for y in 0..shape[2] {
                    for x in 0..shape[3] {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Contiguous `(h, w)` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of channels `[c0, c1)`.
    pub fn channels(&self, c0: usize, c1: usize) -> Self {
        let [n, c, h, w] = self.shape;
        assert!(c0 <= c1 && c1 <= c, "channel range out of bounds");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (c1 - c0) * hw);
        for ni in 0..n {
            let start = (ni * c + c0) * hw;
            data.extend_from_slice(&self.data[start..start + (c1 - c0) * hw]);
        }
        Self {
            shape: [n, c1 - c0, h, w],
            data,
        }
    }

    /// Copy of batch items `[n0, n1)`.
    pub fn batch_slice(&self, n0: usize, n1: usize) -> Self {
        let [n, c, h, w] = self.shape;
        assert!(n0 <= n1 && n1 <= n, "batch range out of bounds");
        let item = c * h * w;
        Self {
            shape: [n1 - n0, c, h, w],
            data: self.data[n0 * item..n1 * item].to_vec(),
        }
    }

    /// Stacks tensors of identical `(c, h, w)` along the batch axis.
    pub fn stack_batch(items: &[Tensor4]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Empty("stack_batch of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    left: first.shape,
                    right: t.shape,
                });
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let t = Tensor4::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at([0, 1, 0, 0]), 3.0);
        assert_eq!(t.plane(0, 1), &[3.0, 4.0]);
    }

    #[test]
    fn channel_and_batch_slices() {
        let t = Tensor4::from_fn([2, 3, 1, 2], |[n, c, _, x]| (n * 100 + c * 10 + x) as f64);
        let mid = t.channels(1, 2);
        assert_eq!(mid.shape(), [2, 1, 1, 2]);
        assert_eq!(mid.data(), &[10.0, 11.0, 110.0, 111.0]);
        let b = t.batch_slice(1, 2);
        assert_eq!(b.at([0, 2, 0, 1]), 121.0);
        let back = Tensor4::stack_batch(&[t.batch_slice(0, 1), b]).unwrap();
        assert_eq!(back, t);
    }
}
