//! Scalar special functions shared by the response models and samplers.

use core::f64::consts::{PI, SQRT_2};

pub use libm::{atan2, cos, erfc, exp, fabs, log, log1p, sin, sqrt};

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    exp(-0.5 * x * x) / sqrt(2.0 * PI)
}

/// Standard normal CDF, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `ln Φ(x)`, finite for every finite `x`.
pub fn ln_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return log(normal_cdf(x));
    }
    // Asymptotic series of the Mills ratio; erfc underflows past here.
    let x2 = x * x;
    let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
    -0.5 * x2 - log(-x) - 0.5 * log(2.0 * PI) + log(series)
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -log1p(exp(-x))
    } else {
        x - log1p(exp(x))
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median and quartiles by linear interpolation between order statistics.
/// Returns `None` for an empty sample.
pub fn quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = alloc::vec::Vec::from(values);
    sorted.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        let frac = pos - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    };
    Some((at(0.25), at(0.5), at(0.75)))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quartiles(values).map(|(_, m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
        assert!((normal_cdf(-3.0) - 0.0013498980316301).abs() < 1e-14);
    }

    #[test]
    fn ln_cdf_is_continuous_across_the_asymptotic_switch() {
        let below = ln_normal_cdf(-30.0 - 1e-9);
        let above = ln_normal_cdf(-30.0 + 1e-9);
        assert!((below - above).abs() < 1e-6, "{below} vs {above}");
        assert!(ln_normal_cdf(-200.0).is_finite());
    }

    #[test]
    fn ln_sigmoid_matches_direct_form() {
        for &x in &[-30.0, -2.0, 0.0, 0.7, 12.0] {
            assert!((ln_sigmoid(x) - log(sigmoid(x))).abs() < 1e-12);
        }
        assert!(ln_sigmoid(-800.0).is_finite());
    }

    #[test]
    fn quartiles_interpolate() {
        let (q1, m, q3) = quartiles(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((q1, m, q3), (2.0, 3.0, 4.0));
        assert_eq!(median(&[1.0, 2.0]), Some(1.5));
        assert_eq!(median(&[]), None);
    }
}
