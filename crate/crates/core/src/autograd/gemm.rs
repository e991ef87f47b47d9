//! Matrix products backing convolution and linear layers.

use serde::{Deserialize, Serialize};

/// Arithmetic width used inside matrix products.
///
/// `F64` is exact-mode and used by every gradient check. `MixedF32` rounds
/// GEMM operands to `f32` and accumulates the product in `f32` before widening
/// the result back; storage everywhere else stays `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    MixedF32,
}

/// Logical `m×k` matrix stored row-major, or its transpose when `trans` is set
/// (then stored as `k×m`).
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn n(data: &'a [f64]) -> Self {
        Self { data, trans: false }
    }

    pub fn t(data: &'a [f64]) -> Self {
        Self { data, trans: true }
    }

    /// (row stride, col stride) of the logical matrix with `rows×cols` shape.
    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        if self.trans {
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a: m×k`, `b: k×n`,
/// `c: m×n` row-major.
pub(crate) fn gemm(precision: Precision, m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, c: &mut [f64], accumulate: bool) {
    assert_eq!(a.data.len(), m * k, "gemm: lhs length");
    assert_eq!(b.data.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);
    match precision {
        Precision::F64 => {
            let beta = if accumulate { 1.0 } else { 0.0 };
            // SAFETY: lengths checked above; strides describe in-bounds
            // row-major layouts of exactly those lengths.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr(),
                    rsa,
                    csa,
                    b.data.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Precision::MixedF32 => {
            let a32: Vec<f32> = a.data.iter().map(|&x| x as f32).collect();
            let b32: Vec<f32> = b.data.iter().map(|&x| x as f32).collect();
            let mut c32 = vec![0f32; m * n];
            // SAFETY: as above, on the f32 copies.
            unsafe {
                matrixmultiply::sgemm(m, k, n, 1.0, a32.as_ptr(), rsa, csa, b32.as_ptr(), rsb, csb, 0.0, c32.as_mut_ptr(), n as isize, 1);
            }
            if accumulate {
                for (o, v) in c.iter_mut().zip(&c32) {
                    *o += *v as f64;
                }
            } else {
                for (o, v) in c.iter_mut().zip(&c32) {
                    *o = *v as f64;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if at { a[p * m + i] } else { a[i * k + p] };
                    let bv = if bt { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn all_transpose_combinations_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.7).cos()).collect();
        for at in [false, true] {
            for bt in [false, true] {
                let am = Mat { data: &a, trans: at };
                let bm = Mat { data: &b, trans: bt };
                let mut c = vec![1.0; m * n];
                gemm(Precision::F64, m, k, n, am, bm, &mut c, false);
                let want = naive(m, k, n, &a, at, &b, bt);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
                gemm(Precision::F64, m, k, n, am, bm, &mut c, true);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - 2.0 * y).abs() < 1e-12);
                }
                let mut c32 = vec![0.0; m * n];
                gemm(Precision::MixedF32, m, k, n, am, bm, &mut c32, false);
                for (x, y) in c32.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }
}
