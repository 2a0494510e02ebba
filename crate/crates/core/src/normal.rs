//! Standard normal distribution function and its inverse.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

/// Standard normal CDF, `Φ(x)`.
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Inverse standard normal CDF, `Φ⁻¹(p)` for `p` in `(0, 1)`.
///
/// Returns `-inf`/`+inf` at the endpoints and NaN outside `[0, 1]`.
pub fn quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let mut x = -SQRT_2 * erfc_inv(2.0 * p);
    // one Halley step cleans up the last few ulps of erfc_inv
    let density = pdf(x);
    if density > 0.0 {
        let u = (cdf(x) - p) / density;
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}
