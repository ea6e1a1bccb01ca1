//! f64 matrix multiplication backed by the system BLAS.
//!
//! All heavy lifting in the training stack funnels through [`dgemm`].
//! OpenBLAS is pinned to a single thread so results are bit-reproducible
//! and so run-level parallelism (rayon over independent runs) is the only
//! source of concurrency.

use std::os::raw::{c_char, c_double, c_int};
use std::sync::Once;

#[link(name = "openblas")]
extern "C" {
    fn dgemm_(
        transa: *const c_char,
        transb: *const c_char,
        m: *const c_int,
        n: *const c_int,
        k: *const c_int,
        alpha: *const c_double,
        a: *const c_double,
        lda: *const c_int,
        b: *const c_double,
        ldb: *const c_int,
        beta: *const c_double,
        c: *mut c_double,
        ldc: *const c_int,
    );
    fn openblas_set_num_threads(n: c_int);
}

static BLAS_INIT: Once = Once::new();

fn init_blas() {
    BLAS_INIT.call_once(|| unsafe {
        openblas_set_num_threads(1);
    });
}

/// C += A @ B with row-major slices, A: m x k, B: k x n, C: m x n.
///
/// `transpose_a` / `transpose_b` multiply by the transpose without
/// materializing it (A is then stored k x m, B is stored n x k).
pub fn dgemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    transpose_a: bool,
    b: &[f64],
    transpose_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs size mismatch");
    assert_eq!(b.len(), k * n, "rhs size mismatch");
    assert_eq!(c.len(), m * n, "out size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    init_blas();

    // Row-major C = A B is computed as column-major C^T = B^T A^T, so the
    // operand roles swap when calling Fortran BLAS.
    let (ta, tb) = (transpose_b, transpose_a);
    let ta_c: c_char = if ta { b'T' as c_char } else { b'N' as c_char };
    let tb_c: c_char = if tb { b'T' as c_char } else { b'N' as c_char };
    let bm = n as c_int; // rows of column-major C^T
    let bn = m as c_int;
    let bk = k as c_int;
    let lda = if ta { bk } else { bm }; // leading dim of B in its stored layout
    let ldb = if tb { bn } else { bk };
    let ldc = bm;
    let alpha: c_double = 1.0;
    let beta: c_double = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        dgemm_(
            &ta_c,
            &tb_c,
            &bm,
            &bn,
            &bk,
            &alpha,
            b.as_ptr(),
            &lda,
            a.as_ptr(),
            &ldb,
            &beta,
            c.as_mut_ptr(),
            &ldc,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..n {
                    c[i * n + j] += av * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_multiply() {
        let (m, n, k) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(m, n, k, &a, &b);
        let mut c = vec![0.0; m * n];
        dgemm(m, n, k, &a, false, &b, false, &mut c, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn transposed_operands() {
        let (m, n, k) = (4, 6, 3);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 + 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sqrt()).collect();
        let want = naive(m, n, k, &a, &b);

        // A stored transposed (k x m)
        let mut a_t = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                a_t[p * m + i] = a[i * k + p];
            }
        }
        // B stored transposed (n x k)
        let mut b_t = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                b_t[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        dgemm(m, n, k, &a_t, true, &b, false, &mut c, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut c2 = vec![1.0; m * n];
        dgemm(m, n, k, &a, false, &b_t, true, &mut c2, true);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }
}
