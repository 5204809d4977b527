//! Raw row-major kernels. Loop orders are fixed; no kernel reorders a
//! reduction based on data or thread count.

use crate::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_acc(a, b, &mut c, m, k, n);
    c
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`, giving `k×n`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a · bᵀ` for `a[m×n]`, `b[k×n]`, giving `m×k`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let bt = transpose(b, k, n);
    matmul(a, &bt, m, n, k)
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Dot product with eight interleaved partial sums combined in a fixed order.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Entries of `aᵀ·b` only at the flat positions in `active` (row-major over
/// a `k×n` result), with `at = aᵀ` as `k×m` and `bt = bᵀ` as `n×m`.
pub fn sampled_tn<T: Scalar>(at: &[T], bt: &[T], m: usize, n: usize, active: &[u32]) -> Vec<T> {
    active
        .iter()
        .map(|&idx| {
            let (p, j) = (idx as usize / n, idx as usize % n);
            dot(&at[p * m..(p + 1) * m], &bt[j * m..(j + 1) * m])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_products() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let i = [1.0f64, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &i, 2, 2, 2), a.to_vec());
        assert_eq!(matmul(&[2.0f64], &[3.0], 1, 1, 1), vec![6.0]);
        // aᵀ·a and a·aᵀ
        assert_eq!(matmul_tn(&a, &a, 2, 2, 2), vec![10.0, 14.0, 14.0, 20.0]);
        assert_eq!(matmul_nt(&a, &a, 2, 2, 2), vec![5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn sampled_matches_dense() {
        let (m, k, n) = (11, 5, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let full = matmul_tn(&a, &b, m, k, n);
        let active: Vec<u32> = (0..(k * n) as u32).filter(|i| i % 3 == 0).collect();
        let got = sampled_tn(&transpose(&a, m, k), &transpose(&b, m, n), m, n, &active);
        for (g, &i) in got.iter().zip(&active) {
            assert!((g - full[i as usize]).abs() < 1e-12);
        }
    }
}
