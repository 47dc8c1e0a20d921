//! GEMM entry points.
//!
//! All dense products in the crate funnel through these two wrappers around
//! `matrixmultiply::dgemm`. Transposed operands are expressed through
//! swapped strides instead of materialized transposes, which is what the
//! backward passes rely on: `dX = dY·Wᵀ` and `dW = Xᵀ·dY` each cost one
//! GEMM and no copies.

use super::Tensor;

/// Whether an operand participates as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Normal,
    Transposed,
}

/// Row/col strides for a row-major matrix viewed under `layout`.
/// Returns (rows, cols, row_stride, col_stride) of the *effective* operand.
fn view(t: &Tensor, layout: Layout) -> (usize, usize, isize, isize) {
    match layout {
        Layout::Normal => (t.rows, t.cols, t.cols as isize, 1),
        Layout::Transposed => (t.cols, t.rows, 1, t.cols as isize),
    }
}

fn gemm_into(alpha: f64, a: &Tensor, la: Layout, b: &Tensor, lb: Layout, beta: f64, c: &mut Tensor) {
    let (m, ka, rsa, csa) = view(a, la);
    let (kb, n, rsb, csb) = view(b, lb);
    assert_eq!(ka, kb, "gemm inner dimensions differ: {ka} vs {kb}");
    assert_eq!(c.rows, m, "gemm output rows");
    assert_eq!(c.cols, n, "gemm output cols");
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            ka,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// `C = alpha · op(A) · op(B)`, overwriting `C`.
pub fn dgemm(alpha: f64, a: &Tensor, la: Layout, b: &Tensor, lb: Layout, c: &mut Tensor) {
    gemm_into(alpha, a, la, b, lb, 0.0, c);
}

/// `C += alpha · op(A) · op(B)`, accumulating into `C`.
pub fn dgemm_acc(alpha: f64, a: &Tensor, la: Layout, b: &Tensor, lb: Layout, c: &mut Tensor) {
    gemm_into(alpha, a, la, b, lb, 1.0, c);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
        let (am, ak) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (_, bn) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        let get = |t: &Tensor, tr: bool, i: usize, j: usize| if tr { t.at(j, i) } else { t.at(i, j) };
        let mut c = Tensor::zeros(am, bn);
        for i in 0..am {
            for j in 0..bn {
                let mut s = 0.0;
                for k in 0..ak {
                    s += get(a, ta, i, k) * get(b, tb, k, j);
                }
                *c.at_mut(i, j) = s;
            }
        }
        c
    }

    #[test]
    fn transposed_operands_match_naive() {
        let a = Tensor::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.37 - 1.0).collect());
        let b = Tensor::from_vec(3, 5, (0..15).map(|v| (v as f64).sin()).collect());
        // Aᵀ(3x4 -> 4x3) · B(3x5) = 4x5
        let mut c = Tensor::zeros(4, 5);
        dgemm(1.0, &a, Layout::Transposed, &b, Layout::Normal, &mut c);
        let e = naive(&a, true, &b, false);
        for (x, y) in c.data.iter().zip(&e.data) {
            assert!((x - y).abs() < 1e-12);
        }

        let d = Tensor::from_vec(5, 4, (0..20).map(|v| (v as f64).cos()).collect());
        // A(3x4) · Dᵀ(5x4 -> 4x5) = 3x5
        let mut c2 = Tensor::zeros(3, 5);
        dgemm(1.0, &a, Layout::Normal, &d, Layout::Transposed, &mut c2);
        let e2 = naive(&a, false, &d, true);
        for (x, y) in c2.data.iter().zip(&e2.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulate_adds_to_existing() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let mut c = Tensor::from_vec(2, 2, vec![10.0, 10.0, 10.0, 10.0]);
        dgemm_acc(1.0, &a, Layout::Normal, &b, Layout::Normal, &mut c);
        assert_eq!(c.data, vec![11.0, 12.0, 13.0, 14.0]);
    }
}
