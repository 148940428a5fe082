//! Raw dense kernels shared by the tape ops.
//!
//! The hot loop is the `c_row += a_ik * b_row` form: both slices are
//! contiguous, which lets LLVM vectorize it for the host target.

use crate::scalar::Scalar;

/// C[m×n] += A[m×k] · B[k×n], row-major.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
}

/// C[m×n] = scale · A[m×k] · B[k×n].
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, scale: S) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    if scale != S::ONE {
        for v in &mut c {
            *v *= scale;
        }
    }
    c
}

/// B[n×m] = A[m×n] transposed.
pub fn transpose<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let c = matmul::<f64>(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1, 1.0);
        assert_eq!(c, vec![17.0, 39.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f64> = (0..12).map(|x| x as f64).collect();
        let t = transpose(&a, 3, 4);
        let back = transpose(&t, 4, 3);
        assert_eq!(a, back);
    }
}
