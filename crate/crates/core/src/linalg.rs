//! Dense symmetric positive-definite solves.
//!
//! The ridge systems this crate produces are small (a few thousand rows) and
//! well conditioned (the regularizer bounds the spectrum away from zero), so
//! a blocked right-looking Cholesky backed by the same GEMM as everything
//! else is plenty, and keeps results bit-deterministic.

use crate::error::{Error, Result};
use ndarray::{s, Array2, ArrayView2};

const BLOCK: usize = 128;

/// In-place lower Cholesky factorization of a symmetric positive-definite
/// matrix. On return the lower triangle (diagonal included) holds `L` with
/// `A = L·L^T`; the strict upper triangle is left untouched.
pub fn cholesky_in_place(a: &mut Array2<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape(
            "square matrix",
            format!("{}x{}", n, a.ncols()),
        ));
    }
    let mut k = 0;
    while k < n {
        let kb = BLOCK.min(n - k);
        factor_diag_block(a, k, kb)?;
        if k + kb < n {
            solve_panel(a, k, kb);
            // Trailing update: A22 -= L21 · L21^T.
            let (left, mut trailing) = a
                .slice_mut(s![k + kb.., ..])
                .split_at(ndarray::Axis(1), k + kb);
            let panel = left.slice(s![.., k..k + kb]);
            ndarray::linalg::general_mat_mul(-1.0, &panel, &panel.t(), 1.0, &mut trailing);
        }
        k += kb;
    }
    Ok(())
}

/// Unblocked Cholesky of the `kb × kb` diagonal block at offset `k`.
fn factor_diag_block(a: &mut Array2<f64>, k: usize, kb: usize) -> Result<()> {
    for j in 0..kb {
        let mut d = a[[k + j, k + j]];
        for t in 0..j {
            let l = a[[k + j, k + t]];
            d -= l * l;
        }
        if d.is_nan() || d <= 0.0 {
            return Err(Error::Numeric(format!(
                "matrix is not positive definite (pivot {} = {d:e})",
                k + j
            )));
        }
        let diag = d.sqrt();
        a[[k + j, k + j]] = diag;
        for i in (j + 1)..kb {
            let mut v = a[[k + i, k + j]];
            for t in 0..j {
                v -= a[[k + i, k + t]] * a[[k + j, k + t]];
            }
            a[[k + i, k + j]] = v / diag;
        }
    }
    Ok(())
}

/// Panel solve: rows below the diagonal block get `X · L_kk^T = A` applied,
/// i.e. each row solves a small lower-triangular system.
fn solve_panel(a: &mut Array2<f64>, k: usize, kb: usize) {
    let n = a.nrows();
    for i in (k + kb)..n {
        for j in 0..kb {
            let mut v = a[[i, k + j]];
            for t in 0..j {
                v -= a[[i, k + t]] * a[[k + j, k + t]];
            }
            a[[i, k + j]] = v / a[[k + j, k + j]];
        }
    }
}

/// Solves `A·X = B` given the lower factor `L` of `A` (from
/// [`cholesky_in_place`]): forward then backward substitution per column.
pub fn cholesky_solve(l: &Array2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    debug_assert_eq!(b.nrows(), n);
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        // L y = b
        for i in 0..n {
            let mut v = x[[i, c]];
            for t in 0..i {
                v -= l[[i, t]] * x[[t, c]];
            }
            x[[i, c]] = v / l[[i, i]];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let mut v = x[[i, c]];
            for t in (i + 1)..n {
                v -= l[[t, i]] * x[[t, c]];
            }
            x[[i, c]] = v / l[[i, i]];
        }
    }
    x
}

/// Solves the SPD system `A·X = B`, consuming `A`.
pub fn solve_spd(mut a: Array2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    cholesky_in_place(&mut a)?;
    Ok(cholesky_solve(&a, b))
}
