//! Dense matrix-product kernels.
//!
//! All products reduce to one row-major `C += A·B` loop in which every output
//! row is produced by the same sequence of additions. The `parallel` feature
//! splits output rows across rayon workers; because rows never share
//! accumulators the parallel and sequential paths are bit-identical.

use std::borrow::Cow;

/// Below this many multiply-adds the rayon split costs more than it saves.
pub const PARALLEL_THRESHOLD: usize = 1 << 15;

/// `c = op(a) · op(b)` where `op` transposes when the flag is set.
/// `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let a: Cow<[f64]> = if ta { Cow::Owned(transpose(a, k, m)) } else { Cow::Borrowed(a) };
    let b: Cow<[f64]> = if tb { Cow::Owned(transpose(b, n, k)) } else { Cow::Borrowed(b) };
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PARALLEL_THRESHOLD && m > 1 {
            gemm_nn_parallel(&a, &b, c, m, k, n);
            return;
        }
    }
    gemm_nn_sequential(&a, &b, c, m, k, n);
}

/// Row-major transpose of an `rows×cols` matrix.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

const MR: usize = 4;
const NR: usize = 4;

/// Output rows `rows` of `C = A·B` into `c` (which holds exactly those rows).
/// Each entry is accumulated from zero over `p = 0..k` in order, so the
/// result does not depend on how rows are blocked or split.
fn gemm_rows(a: &[f64], b: &[f64], c: &mut [f64], rows: std::ops::Range<usize>, k: usize, n: usize) {
    let r0 = rows.start;
    let mut i = rows.start;
    while i < rows.end {
        let mr = MR.min(rows.end - i);
        let mut j = 0;
        while j < n {
            let nr = NR.min(n - j);
            if mr == MR && nr == NR {
                let mut acc = [[0.0f64; NR]; MR];
                let a_rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
                for p in 0..k {
                    let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("block width");
                    for r in 0..MR {
                        let av = a_rows[r][p];
                        for q in 0..NR {
                            acc[r][q] += av * bp[q];
                        }
                    }
                }
                for (r, acc_r) in acc.iter().enumerate() {
                    let row = (i + r - r0) * n + j;
                    c[row..row + NR].copy_from_slice(acc_r);
                }
            } else {
                for r in 0..mr {
                    let a_row = &a[(i + r) * k..(i + r + 1) * k];
                    for q in 0..nr {
                        let mut acc = 0.0;
                        for (p, &av) in a_row.iter().enumerate() {
                            acc += av * b[p * n + j + q];
                        }
                        c[(i + r - r0) * n + j + q] = acc;
                    }
                }
            }
            j += nr;
        }
        i += mr;
    }
}

pub fn gemm_nn_sequential(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 0 {
        return;
    }
    gemm_rows(a, b, c, 0..m, k, n);
}

#[cfg(feature = "parallel")]
pub fn gemm_nn_parallel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    use rayon::prelude::*;
    if n == 0 {
        return;
    }
    let rows_per_task = (PARALLEL_THRESHOLD / (k * n).max(1)).clamp(1, m).next_multiple_of(MR);
    c.par_chunks_mut(rows_per_task * n).enumerate().for_each(|(t, chunk)| {
        let r0 = t * rows_per_task;
        gemm_rows(a, b, chunk, r0..r0 + chunk.len() / n, k, n);
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn transposed_forms_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm(&a, &b, &mut c, m, k, n, false, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        let mut c2 = vec![0.0; m * n];
        gemm(&at, &bt, &mut c2, m, k, n, true, true);
        assert_eq!(c, c2);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_is_bit_identical() {
        let (m, k, n) = (97, 64, 33);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.013).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.007).cos()).collect();
        let mut s = vec![0.0; m * n];
        let mut p = vec![0.0; m * n];
        gemm_nn_sequential(&a, &b, &mut s, m, k, n);
        gemm_nn_parallel(&a, &b, &mut p, m, k, n);
        assert_eq!(s, p);
    }
}
