//! Dense matrix products. Inputs are widened to `f64` so the inner
//! products accumulate in 64 bits; results are rounded back to `f32`.

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// `C[m,n] = op(A)[m,k] * op(B)[k,n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
) -> Vec<f32> {
    let mut c = vec![0.0f64; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides describe views that lie entirely within `a` and `b`
        // (checked by the callers' shape arithmetic), and `c` is m*n row-major.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    c.into_iter().map(|v| v as f32).collect()
}

/// `A[m,k] * B[k,n]`
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm(
        m,
        k,
        n,
        &widen(a),
        (k as isize, 1),
        &widen(b),
        (n as isize, 1),
    )
}

/// `A[m,n] * B[k,n]^T`, result `[m,k]`.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    gemm(
        m,
        n,
        k,
        &widen(a),
        (n as isize, 1),
        &widen(b),
        (1, n as isize),
    )
}

/// `A[m,k]^T * B[m,n]`, result `[k,n]`.
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    gemm(
        k,
        m,
        n,
        &widen(a),
        (1, k as isize),
        &widen(b),
        (n as isize, 1),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(a: &[f32], r: usize, c: usize) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let want = naive(&a, &b, m, k, n);
        for (g, w) in matmul_nn(&a, &b, m, k, n).iter().zip(&want) {
            assert!((g - w).abs() < 1e-5);
        }
        let bt = transpose(&b, k, n);
        let got = matmul_nt(&a, &bt, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-5);
        }
        let at = transpose(&a, m, k);
        let got = matmul_tn(&at, &b, k, m, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-5);
        }
    }
}
