//! Raw forward and backward kernels.
//!
//! Everything here is a pure function of its arguments. The autograd tape in
//! [`crate::autograd`] wires these kernels into differentiable operations.

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;
pub mod sample;

pub use conv::{conv2d, conv2d_backward, transposed_conv2d, ConvSpec};
pub use sample::{grid_sample_bilinear, pixel_shuffle, pixel_unshuffle, upsample_grid};

use crate::scalar::Scalar;

/// Row-major `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a` is stored as `[m, k]`, or `[k, m]` when `trans_a`; likewise `b` is
/// `[k, n]` or `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<S: Scalar>(
    a: &[S],
    trans_a: bool,
    b: &[S],
    trans_b: bool,
    c: &mut [S],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "matmul: lhs extent");
    assert_eq!(b.len(), k * n, "matmul: rhs extent");
    assert_eq!(c.len(), m * n, "matmul: output extent");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = S::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: the asserts above bound every index reachable through these
    // extents and strides.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a,
            rsa,
            csa,
            b,
            rsb,
            csb,
            beta,
            c,
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        matmul(&a, false, &b, false, &mut c, 2, 3, 2, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [1.0; 4];
        matmul(&at, true, &bt, true, &mut c2, 2, 3, 2, true);
        assert_eq!(c2, [5.0, 6.0, 11.0, 12.0]);
    }
}
