//! Compressed sparse row matrices.
//!
//! Used for graph operators (scaled Laplacians, edge incidence) and the
//! sampling matrices between hierarchy levels. Multiplication against dense
//! feature matrices supports the batch convention from [`crate::tensor`]:
//! a `(B·V) × F` stack of samples is processed block-by-block, applying the
//! same sparse matrix to each sample's row block.

use crate::tensor::Tensor;

/// Sparse matrix in CSR form with f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    /// `row_ptr[r]..row_ptr[r+1]` indexes the entries of row `r`.
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from coordinate triplets; duplicate positions are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(u32, u32, f64)]) -> Self {
        let mut sorted: Vec<(u32, u32, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        for &(r, c, v) in &sorted {
            assert!((r as usize) < rows && (c as usize) < cols, "triplet out of bounds");
            if let (Some(&last_c), true) = (col_idx.last(), row_ptr[r as usize + 1] > 0) {
                // Still inside the same row: merge duplicates.
                if last_c == c && col_idx.len() > row_ptr[r as usize] {
                    *values.last_mut().unwrap() += v;
                    continue;
                }
            }
            col_idx.push(c);
            values.push(v);
            row_ptr[r as usize + 1] = col_idx.len();
        }
        // Rows without entries inherit the running offset.
        for r in 0..rows {
            if row_ptr[r + 1] < row_ptr[r] {
                row_ptr[r + 1] = row_ptr[r];
            }
        }
        CsrMatrix { rows, cols, row_ptr, col_idx, values }
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries as coordinate triplets in row-major order.
    pub fn to_triplets(&self) -> Vec<(u32, u32, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.push((r as u32, self.col_idx[i], self.values[i]));
            }
        }
        out
    }

    /// CSR form of the transpose.
    pub fn transpose(&self) -> CsrMatrix {
        let mut t: Vec<(u32, u32, f64)> = self
            .to_triplets()
            .into_iter()
            .map(|(r, c, v)| (c, r, v))
            .collect();
        t.sort_by_key(|&(r, c, _)| (r, c));
        CsrMatrix::from_triplets(self.cols, self.rows, &t)
    }

    /// Dense copy (test/oracle use).
    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for (r, c, v) in self.to_triplets() {
            *out.at_mut(r as usize, c as usize) += v;
        }
        out
    }

    /// `out = self · x` for one sample: `x` is `cols × F`, `out` is `rows × F`.
    pub fn mul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows, self.cols, "sparse-dense shape mismatch");
        let mut out = Tensor::zeros(self.rows, x.cols);
        self.mul_block(&x.data, x.cols, &mut out.data);
        out
    }

    /// Apply to each of `blocks` stacked samples: `x` is `(blocks·cols) × F`
    /// row-major, `out` is `(blocks·rows) × F`. `out` is fully overwritten.
    pub fn mul_blocks(&self, x: &[f64], f: usize, blocks: usize, out: &mut [f64]) {
        assert_eq!(x.len(), blocks * self.cols * f, "input block size");
        assert_eq!(out.len(), blocks * self.rows * f, "output block size");
        for b in 0..blocks {
            let xb = &x[b * self.cols * f..(b + 1) * self.cols * f];
            let ob = &mut out[b * self.rows * f..(b + 1) * self.rows * f];
            self.mul_block(xb, f, ob);
        }
    }

    /// Write the Chebyshev polynomial basis `[T₀x | T₁x | … | T_Kx]` of this
    /// (square, scaled) matrix into `dst` as column blocks of width `f`.
    /// `x` is `(blocks·V) × f` row-major; `dst` must be `(blocks·V) × (k+1)·f`.
    /// Uses the three-term recurrence `T_j = 2·M·T_{j−1} − T_{j−2}`.
    pub fn chebyshev_basis_into(&self, x: &[f64], f: usize, blocks: usize, k: usize, dst: &mut Tensor) {
        assert_eq!(self.rows, self.cols, "basis needs a square matrix");
        let rows = blocks * self.rows;
        assert_eq!(x.len(), rows * f, "input size");
        assert_eq!((dst.rows, dst.cols), (rows, (k + 1) * f), "basis output shape");
        write_col_block(dst, 0, f, x);
        if k == 0 {
            return;
        }
        let mut t_prev = x.to_vec();
        let mut t_cur = vec![0.0; rows * f];
        self.mul_blocks(&t_prev, f, blocks, &mut t_cur);
        write_col_block(dst, 1, f, &t_cur);
        let mut scratch = vec![0.0; rows * f];
        for j in 2..=k {
            self.mul_blocks(&t_cur, f, blocks, &mut scratch);
            for (s, p) in scratch.iter_mut().zip(&t_prev) {
                *s = 2.0 * *s - p;
            }
            write_col_block(dst, j, f, &scratch);
            std::mem::swap(&mut t_prev, &mut t_cur);
            std::mem::swap(&mut t_cur, &mut scratch);
        }
    }

    fn mul_block(&self, x: &[f64], f: usize, out: &mut [f64]) {
        out.fill(0.0);
        for r in 0..self.rows {
            let dst = &mut out[r * f..(r + 1) * f];
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                let v = self.values[i];
                let src = &x[self.col_idx[i] as usize * f..(self.col_idx[i] as usize + 1) * f];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }
}

fn write_col_block(dst: &mut Tensor, block: usize, f: usize, src: &[f64]) {
    let total = dst.cols;
    for r in 0..dst.rows {
        dst.data[r * total + block * f..r * total + (block + 1) * f].copy_from_slice(&src[r * f..(r + 1) * f]);
    }
}
