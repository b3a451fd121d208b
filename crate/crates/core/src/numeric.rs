//! Log-space numeric kernels shared across the crate.

/// Natural log of the gamma function.
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// log of `n choose k`, via log-gamma.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// log of the falling factorial `x (x-1) ... (x-k+1)` for integer `x >= k`.
pub fn ln_falling(x: u64, k: u64) -> f64 {
    if k > x {
        return f64::NEG_INFINITY;
    }
    ln_gamma(x as f64 + 1.0) - ln_gamma((x - k) as f64 + 1.0)
}

/// Rising factorial `x (x+1) ... (x+n-1)` in sign/log-magnitude form.
///
/// The gamma-ratio shortcut only applies for `x > 0`; for non-positive `x`
/// the product is accumulated term by term so that zero and negative
/// factors are still handled exactly.
pub fn ln_rising(x: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    if x > 0.0 {
        return (1.0, ln_gamma(x + n as f64) - ln_gamma(x));
    }
    let mut sign = 1.0;
    let mut ln_abs = 0.0;
    for i in 0..n {
        let factor = x + i as f64;
        if factor == 0.0 {
            return (0.0, f64::NEG_INFINITY);
        }
        if factor < 0.0 {
            sign = -sign;
        }
        ln_abs += factor.abs().ln();
    }
    (sign, ln_abs)
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Log density of `N(0, var)` at `x`.
pub fn ln_normal_pdf(x: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + x * x / var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_matches_pascal() {
        assert!((ln_binomial(5, 2).exp() - 10.0).abs() < 1e-12);
        assert!((ln_binomial(10, 0).exp() - 1.0).abs() < 1e-12);
        assert_eq!(ln_binomial(3, 4), f64::NEG_INFINITY);
    }

    #[test]
    fn falling_factorial_small_cases() {
        assert!((ln_falling(5, 3).exp() - 60.0).abs() < 1e-9);
        assert!((ln_falling(7, 0).exp() - 1.0).abs() < 1e-12);
        assert_eq!(ln_falling(2, 3), f64::NEG_INFINITY);
    }

    #[test]
    fn rising_factorial_signs() {
        let (s, l) = ln_rising(2.0, 3);
        assert_eq!(s, 1.0);
        assert!((l.exp() - 24.0).abs() < 1e-9);
        // (-1.5)(-0.5)(0.5) = 0.375
        let (s, l) = ln_rising(-1.5, 3);
        assert_eq!(s, 1.0);
        assert!((l.exp() - 0.375).abs() < 1e-12);
        // (-1)(0)(1) = 0
        let (s, _) = ln_rising(-1.0, 3);
        assert_eq!(s, 0.0);
        // (-2.5)(-1.5)(-0.5) < 0
        let (s, l) = ln_rising(-2.5, 3);
        assert_eq!(s, -1.0);
        assert!((l.exp() - 1.875).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_extremes() {
        assert!((logsumexp(&[0.0, 0.0]) - 2.0_f64.ln()).abs() < 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let shifted = logsumexp(&[-1000.0, -1000.0]);
        assert!((shifted - (-1000.0 + 2.0_f64.ln())).abs() < 1e-9);
    }
}
