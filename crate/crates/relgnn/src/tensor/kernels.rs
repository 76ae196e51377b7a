//! Dense matrix kernels. Row-major, accumulate-into-target variants for the
//! backward pass so gradients sum across multiple uses of a tensor.

use super::Scalar;

/// out = A[m,k] * B[k,n]
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

/// out += A[m,k] * B[k,n]
pub fn matmul_acc<F: Scalar>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + av * b_row[j];
            }
        }
    }
}

/// out[m,k] += G[m,n] * B[k,n]^T   (gradient w.r.t. the left matmul operand)
pub fn matmul_nt_acc<F: Scalar>(out: &mut [F], g: &[F], b: &[F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for j in 0..n {
                s = s + g_row[j] * b_row[j];
            }
            out_row[p] = out_row[p] + s;
        }
    }
}

/// out[k,n] += A[m,k]^T * G[m,n]   (gradient w.r.t. the right matmul operand)
pub fn matmul_tn_acc<F: Scalar>(out: &mut [F], a: &[F], g: &[F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + av * g_row[j];
            }
        }
    }
}
