//! Digamma and trigamma on the positive reals.
//!
//! Both shift the argument up to at least 6 with the recurrences
//! `psi(x) = psi(x + 1) - 1/x` and `psi'(x) = psi'(x + 1) + 1/x^2`, then sum
//! the asymptotic series. At x >= 6 the first omitted term is below 1e-12.

use super::DomainError;

const SHIFT_TO: f64 = 6.0;

fn check(x: f64) -> Result<(), DomainError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(DomainError::NonPositive { name: "x", value: x })
    }
}

pub fn digamma(x: f64) -> Result<f64, DomainError> {
    check(x)?;
    let (mut x, mut shift) = (x, 0.0);
    while x < SHIFT_TO {
        shift += 1.0 / x;
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    // Bernoulli-number coefficients B_2n / 2n.
    let series = r
        * (1.0 / 12.0
            - r * (1.0 / 120.0
                - r * (1.0 / 252.0
                    - r * (1.0 / 240.0 - r * (1.0 / 132.0 - r * (691.0 / 32760.0 - r * (1.0 / 12.0)))))));
    Ok(x.ln() - 0.5 / x - series - shift)
}

pub fn trigamma(x: f64) -> Result<f64, DomainError> {
    check(x)?;
    let (mut x, mut shift) = (x, 0.0);
    while x < SHIFT_TO {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    // Bernoulli-number coefficients B_2n.
    let series = r
        * (1.0 / 6.0
            - r * (1.0 / 30.0
                - r * (1.0 / 42.0 - r * (1.0 / 30.0 - r * (5.0 / 66.0 - r * (691.0 / 2730.0 - r * (7.0 / 6.0)))))));
    Ok(1.0 / x + 0.5 * r + series / x + shift)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    /// psi(x) = -gamma + sum_{n>=0} (1/(n+1) - 1/(n+x)), summed far out
    /// with an integral tail correction.
    fn digamma_series(x: f64) -> f64 {
        let terms = 2_000_000u64;
        let mut sum = 0.0;
        for n in (0..terms).rev() {
            let n = n as f64;
            sum += 1.0 / (n + 1.0) - 1.0 / (n + x);
        }
        let big = terms as f64;
        // Tail of sum (1/(n+1) - 1/(n+x)) for n >= terms.
        let tail = ((big + x - 0.5) / (big + 0.5)).ln();
        -EULER_GAMMA + sum + tail
    }

    /// psi'(x) = sum_{n>=0} 1/(n+x)^2 with an Euler-Maclaurin tail.
    fn trigamma_series(x: f64) -> f64 {
        let terms = 2_000_000u64;
        let mut sum = 0.0;
        for n in (0..terms).rev() {
            let v = n as f64 + x;
            sum += 1.0 / (v * v);
        }
        let a = terms as f64 + x;
        sum + 1.0 / a + 0.5 / (a * a) + 1.0 / (6.0 * a * a * a)
    }

    #[test]
    fn known_values() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-12);
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0).unwrap() - pi2_6).abs() < 1e-12);
        assert!((digamma(2.0).unwrap() - digamma(1.0).unwrap() - 1.0).abs() < 1e-12);
        // psi(1/2) = -gamma - 2 ln 2, psi'(1/2) = pi^2 / 2.
        assert!((digamma(0.5).unwrap() + EULER_GAMMA + 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((trigamma(0.5).unwrap() - 3.0 * pi2_6).abs() < 1e-11);
    }

    #[test]
    fn matches_series_oracle() {
        for &x in &[0.3, 1.0, 2.5, 5.999, 6.0, 7.25, 40.0, 1234.5] {
            assert!((digamma(x).unwrap() - digamma_series(x)).abs() < 1e-10, "digamma {x}");
            assert!((trigamma(x).unwrap() - trigamma_series(x)).abs() < 1e-10, "trigamma {x}");
        }
    }

    #[test]
    fn domain() {
        for x in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(digamma(x).is_err());
            assert!(trigamma(x).is_err());
        }
    }

    proptest! {
        #[test]
        fn recurrences(x in 0.05f64..50.0) {
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x;
            prop_assert!(d.abs() < 1e-10);
            let t = trigamma(x).unwrap() - trigamma(x + 1.0).unwrap() - 1.0 / (x * x);
            prop_assert!(t.abs() < 1e-10 * (1.0 + 1.0 / (x * x)));
        }
    }
}
