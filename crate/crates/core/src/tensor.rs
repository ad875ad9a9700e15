//! A dense, row-major `f64` tensor whose first axis is always the batch.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::invalid("tensor shape must have at least one axis"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(alloc::format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Stacks equal-length rows into a `[rows, width]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::invalid("rows have unequal lengths"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), width], data)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per batch element.
    #[inline]
    pub fn row_len(&self) -> usize {
        self.data.len().checked_div(self.shape[0]).unwrap_or(0)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let w = self.row_len().max(1);
        self.data.chunks(w)
    }

    /// Reinterprets the per-sample layout, keeping the batch axis.
    pub fn reshaped(mut self, sample_shape: &[usize]) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per * self.batch() != self.data.len() {
            return Err(Error::invalid(alloc::format!(
                "cannot reshape {:?} into [_, {:?}]",
                self.shape,
                sample_shape
            )));
        }
        let mut shape = Vec::with_capacity(sample_shape.len() + 1);
        shape.push(self.batch());
        shape.extend_from_slice(sample_shape);
        self.shape = shape;
        Ok(self)
    }

    /// Flattens every batch element into a row: `[batch, row_len]`.
    pub fn flattened(self) -> Self {
        let (b, w) = (self.batch(), self.row_len());
        Tensor {
            shape: vec![b, w],
            data: self.data,
        }
    }

    /// Gathers batch elements by index.
    pub fn select(&self, indices: &[usize]) -> Self {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Row-wise concatenation of two matrices with equal batch size.
    pub fn concat_columns(a: &Tensor, b: &Tensor) -> Result<Self> {
        if a.batch() != b.batch() {
            return Err(Error::invalid("concat: batch sizes differ"));
        }
        let (wa, wb) = (a.row_len(), b.row_len());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..a.batch() {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Tensor::new(vec![a.batch(), wa + wb], data)
    }

    /// Inverse of [`Tensor::concat_columns`]: splits each row after `left` values.
    pub fn split_columns(&self, left: usize) -> (Tensor, Tensor) {
        let w = self.row_len();
        let b = self.batch();
        let mut l = Vec::with_capacity(b * left);
        let mut r = Vec::with_capacity(b * (w - left));
        for row in self.rows().take(b) {
            l.extend_from_slice(&row[..left]);
            r.extend_from_slice(&row[left..]);
        }
        (
            Tensor {
                shape: vec![b, left],
                data: l,
            },
            Tensor {
                shape: vec![b, w - left],
                data: r,
            },
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_both_parts() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[5.0], [6.0]]).unwrap();
        let c = Tensor::concat_columns(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let (l, r) = c.split_columns(2);
        assert_eq!(l, a);
        assert_eq!(r, b);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::zeros(vec![2, 6]);
        assert!(t.clone().reshaped(&[5]).is_err());
        assert_eq!(t.reshaped(&[2, 3]).unwrap().shape(), &[2, 2, 3]);
    }
}
