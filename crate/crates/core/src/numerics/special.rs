use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal CDF. `erfc` keeps relative accuracy in the lower tail.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson integration of the density from a far-left point.
    fn cdf_by_quadrature(x: f64) -> f64 {
        let a = -12.0;
        let n = 200_000;
        let h = (x - a) / n as f64;
        let mut s = normal_pdf(a) + normal_pdf(x);
        for i in 1..n {
            let t = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * normal_pdf(t);
        }
        s * h / 3.0
    }

    #[test]
    fn cdf_matches_quadrature() {
        for &x in &[-6.0, -2.5, -0.5, 0.0, 0.3, 1.0, 4.0] {
            assert!((normal_cdf(x) - cdf_by_quadrature(x)).abs() < 1e-9, "x = {x}");
        }
    }

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-3, 0.3, 1.0, 7.0, 40.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn logistic_symmetry() {
        for &x in &[0.0, 0.5, 3.0, 50.0] {
            assert!((logistic(x) + logistic(-x) - 1.0).abs() < 1e-15);
        }
    }
}
