//! Thin wrapper over matrixmultiply for the crate element type.

use crate::tensor::Elem;

/// C = alpha * A(m x k) * B(k x n) + beta * C(m x n), with explicit row/col
/// strides so callers can fold transposes into the call.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: Elem,
    a: &[Elem],
    rsa: isize,
    csa: isize,
    b: &[Elem],
    rsb: isize,
    csb: isize,
    beta: Elem,
    c: &mut [Elem],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// C = A(m x k) * B(k x n), all row-major and contiguous.
pub fn gemm(m: usize, k: usize, n: usize, a: &[Elem], b: &[Elem], c: &mut [Elem]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(
        m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, c, n as isize, 1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn strided_transpose_matches_manual() {
        // A (2x3) times B^T where B is stored (2x3) row-major.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, -1.0, 2.0, 1.0, 0.0];
        let mut c = [0.0; 4];
        // B^T has element [l, j] = b[j * 3 + l]: row stride 1, col stride 3.
        gemm_strided(2, 3, 2, 1.0, &a, 3, 1, &b, 1, 3, 0.0, &mut c, 2, 1);
        assert_eq!(c, [-2.0, 4.0, -2.0, 13.0]);
    }
}
