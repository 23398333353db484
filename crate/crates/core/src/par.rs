//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) the maybe-parallel entry points run
//! on the rayon pool; without it they compile to plain loops. The explicit
//! `*_seq` twins always run sequentially and exist so benchmarks can compare
//! the two paths in one build.
//!
//! Results are independent of thread count: work is split into fixed-size
//! chunks whose outputs land in disjoint regions, so no floating-point
//! reduction order depends on how chunks are scheduled.

use ndarray::{s, Array2, ArrayView2};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row-chunk height for blocked matrix products. Fixed so the per-chunk
/// kernel tiling (and hence bit-level results) does not vary with the
/// number of workers.
const MATMUL_CHUNK: usize = 256;

/// Maybe-parallel `(0..n).map(f).collect()`.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential `(0..n).map(f).collect()`.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

fn matmul_chunk(a: ArrayView2<f64>, b: ArrayView2<f64>, out: &mut Array2<f64>, row0: usize) {
    let rows = out.nrows();
    let block = a.slice(s![row0..(row0 + rows).min(a.nrows()), ..]);
    ndarray::linalg::general_mat_mul(1.0, &block, &b, 0.0, out);
}

/// Maybe-parallel dense product `a · b`, chunked over rows of `a`.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions must agree");
    let (n, k) = (a.nrows(), b.ncols());
    let starts: Vec<usize> = (0..n).step_by(MATMUL_CHUNK).collect();
    let blocks: Vec<Array2<f64>> = {
        #[cfg(feature = "parallel")]
        {
            starts
                .par_iter()
                .map(|&r0| {
                    let h = MATMUL_CHUNK.min(n - r0);
                    let mut out = Array2::zeros((h, k));
                    matmul_chunk(a, b, &mut out, r0);
                    out
                })
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            starts
                .iter()
                .map(|&r0| {
                    let h = MATMUL_CHUNK.min(n - r0);
                    let mut out = Array2::zeros((h, k));
                    matmul_chunk(a, b, &mut out, r0);
                    out
                })
                .collect()
        }
    };
    let mut full = Array2::zeros((n, k));
    for (&r0, block) in starts.iter().zip(&blocks) {
        full.slice_mut(s![r0..r0 + block.nrows(), ..]).assign(block);
    }
    full
}

/// Sequential twin of [`matmul`] with the same chunking (bit-identical output).
pub fn matmul_seq(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions must agree");
    let (n, k) = (a.nrows(), b.ncols());
    let mut full = Array2::zeros((n, k));
    for r0 in (0..n).step_by(MATMUL_CHUNK) {
        let h = MATMUL_CHUNK.min(n - r0);
        let mut out = Array2::zeros((h, k));
        matmul_chunk(a, b, &mut out, r0);
        full.slice_mut(s![r0..r0 + h, ..]).assign(&out);
    }
    full
}

/// Fixed-order pairwise (cascade) summation over a slice.
///
/// Deterministic for a given input order and independent of chunk scheduling;
/// used wherever a loss or an expectation is reduced over samples.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BASE: usize = 64;
    if xs.len() <= BASE {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn fill(n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |(i, j)| ((i * 31 + j * 17) % 13) as f64 - 6.0)
    }

    #[test]
    fn matmul_matches_sequential_bitwise() {
        let a = fill(300, 70);
        let b = fill(70, 40);
        let p = matmul(a.view(), b.view());
        let q = matmul_seq(a.view(), b.view());
        assert_eq!(p, q);
    }

    #[test]
    fn matmul_matches_naive() {
        let a = fill(17, 9);
        let b = fill(9, 11);
        let got = matmul(a.view(), b.view());
        let want = a.dot(&b);
        for (x, y) in got.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }
}
