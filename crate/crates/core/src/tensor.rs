//! Dense row-major matrices.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::scalar::{gemm, Scalar, Strided};

/// A row-major `rows × cols` matrix. Vectors are stored as `1 × n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length does not match shape"
        );
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        let cols = data.len();
        Self {
            rows: 1,
            cols,
            data,
        }
    }

    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Adds `v` (length `cols`) to every row.
    pub fn add_row_broadcast(&mut self, v: &[T]) {
        assert_eq!(v.len(), self.cols);
        for r in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (a, &b) in r.iter_mut().zip(v) {
                *a += b;
            }
        }
    }

    /// Sum over rows, producing one value per column.
    pub fn column_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in self.data.chunks_exact(self.cols.max(1)) {
            for (o, &x) in out.iter_mut().zip(r) {
                *o += x;
            }
        }
        out
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(parts: &[&Self]) -> Self {
        let cols = parts.first().map_or(0, |p| p.cols);
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols, "vstack width mismatch");
            data.extend_from_slice(&p.data);
        }
        Self { rows, cols, data }
    }

    /// Concatenates along columns; every part must have the same row count.
    pub fn hstack(parts: &[&Self]) -> Self {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                assert_eq!(p.rows, rows, "hstack height mismatch");
                data.extend_from_slice(p.row(r));
            }
        }
        Self { rows, cols, data }
    }

    /// Inverse of [`Tensor::hstack`] for the given column widths.
    pub fn split_cols(&self, widths: &[usize]) -> Vec<Self> {
        assert_eq!(
            widths.iter().sum::<usize>(),
            self.cols,
            "split widths do not cover the columns"
        );
        let mut out: Vec<Self> = widths.iter().map(|&w| Self::zeros(self.rows, w)).collect();
        for r in 0..self.rows {
            let mut start = 0;
            for (o, &w) in out.iter_mut().zip(widths) {
                o.row_mut(r).copy_from_slice(&self.row(r)[start..start + w]);
                start += w;
            }
        }
        out
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        gemm(
            self.rows,
            self.cols,
            rhs.cols,
            T::one(),
            &self.data,
            Strided::row_major(self.cols),
            &rhs.data,
            Strided::row_major(rhs.cols),
            T::zero(),
            &mut out.data,
            Strided::row_major(rhs.cols),
        );
        out
    }

    /// `self · rhsᵀ`.
    pub fn matmul_nt(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.cols, "matmul_nt inner dimension mismatch");
        let mut out = Self::zeros(self.rows, rhs.rows);
        gemm(
            self.rows,
            self.cols,
            rhs.rows,
            T::one(),
            &self.data,
            Strided::row_major(self.cols),
            &rhs.data,
            Strided::transposed(rhs.cols),
            T::zero(),
            &mut out.data,
            Strided::row_major(rhs.rows),
        );
        out
    }

    /// `acc += selfᵀ · rhs`.
    pub fn matmul_tn_acc(&self, rhs: &Self, acc: &mut Self) {
        assert_eq!(self.rows, rhs.rows, "matmul_tn inner dimension mismatch");
        assert_eq!(acc.shape(), (self.cols, rhs.cols));
        gemm(
            self.cols,
            self.rows,
            rhs.cols,
            T::one(),
            &self.data,
            Strided::transposed(self.cols),
            &rhs.data,
            Strided::row_major(rhs.cols),
            T::one(),
            &mut acc.data,
            Strided::row_major(rhs.cols),
        );
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
