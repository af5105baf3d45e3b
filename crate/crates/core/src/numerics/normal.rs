const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density and distribution function `(φ(x), Φ(x))`.
pub fn std_normal(x: f64) -> (f64, f64) {
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    let cdf = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
    (pdf, cdf)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        let (p, c) = std_normal(0.0);
        assert!((p - 0.398_942_280_4).abs() < 1e-10);
        assert_eq!(c, 0.5);
        assert!((std_normal_cdf(1.96) - 0.975_002_1).abs() < 1e-6);
    }

    #[test]
    fn symmetry() {
        for x in [0.1, 0.5, 1.0, 2.5, 5.0, 8.0] {
            let s = std_normal_cdf(x) + std_normal_cdf(-x);
            assert!((s - 1.0).abs() < 1e-14, "x={x}");
        }
    }

    #[test]
    fn cdf_matches_series() {
        // Taylor series of erf around 0, summed in full precision.
        fn erf_series(z: f64) -> f64 {
            let mut sum = 0.0;
            let mut term = z;
            let mut n = 0.0;
            while term.abs() > 1e-18 {
                sum += term / (2.0 * n + 1.0);
                n += 1.0;
                term *= -z * z / n;
            }
            2.0 / std::f64::consts::PI.sqrt() * sum
        }
        for x in [-2.0, -0.3, 0.7, 1.96, 2.5] {
            let series = 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
            assert!((std_normal_cdf(x) - series).abs() < 1e-12, "x={x}");
        }
    }
}
