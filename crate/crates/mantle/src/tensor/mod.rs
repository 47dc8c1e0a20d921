//! Dense float64 matrices and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major matrix; batches are represented by
//! stacking samples along the row axis, so a batch of `B` meshes with `V`
//! vertices and `F` features is one `(B·V) × F` matrix and every layer is a
//! handful of large GEMMs. [`Tape`] records an eager computation graph over
//! tensors and replays it in reverse to produce exact gradients; see the
//! [`tape`] module for the operation set.

mod gemm;
pub mod optim;
pub mod tape;

pub use optim::SgdMomentum;
pub use tape::{Tape, Var};

pub(crate) use gemm::{dgemm, dgemm_acc, Layout};

use serde::{Deserialize, Serialize};

/// Row-major float64 matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Matrix taking ownership of row-major `data`; panics on length mismatch.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    /// Single-element matrix.
    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    /// True when the matrix has no elements.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element at `(r, c)`.
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    /// Mutable element at `(r, c)`.
    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    /// Row `r` as a slice.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Row `r` as a mutable slice.
    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · other` (plain value-level product, no autodiff).
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions differ");
        let mut out = Tensor::zeros(self.rows, other.cols);
        dgemm(1.0, self, Layout::Normal, other, Layout::Normal, &mut out);
        out
    }

    /// `selfᵀ` as a new matrix.
    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop() {
        // Small fixed case checked against the naive definition.
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        let mut expect = Tensor::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    *expect.at_mut(i, j) += a.at(i, k) * b.at(k, j);
                }
            }
        }
        for (x, y) in c.data.iter().zip(&expect.data) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.transpose().transpose(), a);
    }
}
