use crate::scalar::{s, Scalar};

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    // Split on sign so large |x| never overflows exp.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Exact GELU: `x * Phi(x)` with the standard normal CDF via erf.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    s::<S>(0.5) * x * (S::one() + (x * s(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let cdf = s::<S>(0.5) * (S::one() + (x * s(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (s::<S>(-0.5) * x * x).exp() * s(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_zero_is_half() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
    }

    #[test]
    fn gelu_reference_points() {
        // Phi(1) = 0.841344746...
        assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((gelu(1.0f32) - 0.8413).abs() < 1e-3);
        assert_eq!(gelu(0.0f64), 0.0);
    }
}
