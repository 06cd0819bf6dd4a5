//! Row-major matrix products used by conv and attention.
//!
//! Products go through `matrixmultiply`, which is single-threaded and
//! deterministic for a given shape.

use crate::scalar::Scalar;

/// `c (m×n) += a (m×k) · b (k×n)`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, (a, k as isize, 1), (b, n as isize, 1), c);
}

/// `c (m×n) += a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, (a, k as isize, 1), (b, 1, k as isize), c);
}

/// `c (m×n) += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    T::gemm_acc(m, k, n, (a, 1, m as isize), (b, n as isize, 1), c);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[test]
    fn three_layouts_agree_with_naive() {
        let (m, k, n) = (5, 11, 7);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 19) as f64 - 9.0) / 7.0).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        let mut c2 = vec![0.0; m * n];
        matmul_bt_acc(&a, &transpose(&b, k, n), &mut c2, m, k, n);
        let mut c3 = vec![0.0; m * n];
        matmul_at_acc(&transpose(&a, m, k), &b, &mut c3, k, m, n);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c2[i] - want[i]).abs() < 1e-12);
            assert!((c3[i] - want[i]).abs() < 1e-12);
        }
    }
}
