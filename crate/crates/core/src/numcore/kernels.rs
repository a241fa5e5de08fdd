//! Dense kernels used by the graph ops.
//!
//! Every output element is produced by a single fixed-order loop, so results
//! are bitwise reproducible. Products and reductions accumulate in `f64`.

use alloc::vec;
use alloc::vec::Vec;

/// `c (+)= a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    if n == 0 {
        return;
    }
    if k == 0 {
        return;
    }
    let mut acc = vec![0.0f64; n];
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (s, &c) in acc.iter_mut().zip(c_row.iter()) {
            *s = c as f64;
        }
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            let aik = aik as f64;
            for (s, &bkj) in acc.iter_mut().zip(b_row) {
                *s += aik * bkj as f64;
            }
        }
        for (c, &s) in c_row.iter_mut().zip(acc.iter()) {
            *c = s as f32;
        }
    }
}

/// `c (+)= a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, accumulate: bool) {
    let mut bt = vec![0.0; k * n];
    super::tensor::transpose_into(b, n, k, &mut bt);
    gemm(a, &bt, c, m, k, n, accumulate);
}

/// `c (+)= aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, accumulate: bool) {
    let mut at = vec![0.0; k * m];
    super::tensor::transpose_into(a, k, m, &mut at);
    gemm(&at, b, c, m, k, n, accumulate);
}

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with `f64` accumulation.
pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn sum64(a: &[f32]) -> f64 {
    a.iter().map(|&x| x as f64).sum()
}

pub fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Batched `c = a·b` over a leading batch axis.
pub fn bmm(a: &[f32], b: &[f32], batch: usize, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        gemm(
            &a[bi * m * k..(bi + 1) * m * k],
            &b[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
            false,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.2).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(&a, &b, &mut c, m, k, n, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }

        let mut bt = vec![0.0; k * n];
        crate::numcore::tensor::transpose_into(&b, k, n, &mut bt);
        let mut c2 = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c2, m, k, n, false);
        assert_eq!(c, c2);

        let mut at = vec![0.0; m * k];
        crate::numcore::tensor::transpose_into(&a, m, k, &mut at);
        let mut c3 = vec![1.0; m * n];
        gemm_tn(&at, &b, &mut c3, m, k, n, true);
        for (x, y) in c3.iter().zip(&c) {
            assert!((x - (y + 1.0)).abs() < 1e-5);
        }
    }
}
