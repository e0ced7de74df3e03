//! Standard normal helpers shared by the order-statistic and imputation code.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;
use std::f64::consts::{PI, SQRT_2};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Upper tail `1 - cdf(x)`, accurate far into the tail.
pub fn sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

pub fn ln_cdf(x: f64) -> f64 {
    cdf(x).ln()
}

pub fn ln_sf(x: f64) -> f64 {
    sf(x).ln()
}

fn standard() -> Normal {
    Normal::standard()
}

/// Standard normal quantile. `p` must lie in (0, 1).
pub fn inv_cdf(p: f64) -> f64 {
    standard().inverse_cdf(p)
}

/// Upper-tail quantile: the `x` with `sf(x) = q`, precise for tiny `q`.
pub fn inv_sf(q: f64) -> f64 {
    -inv_cdf(q)
}

/// Log-density of a diagonal Gaussian evaluated at `x`.
pub fn diag_log_pdf(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((&x, &m), &s)| ln_pdf((x - m) / s) - s.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_invert_cdf() {
        for &p in &[1e-12, 1e-6, 0.01, 0.3, 0.5, 0.9, 0.999] {
            assert!((cdf(inv_cdf(p)) - p).abs() / p < 1e-9, "p={p}");
        }
        assert!((sf(inv_sf(1e-15)) - 1e-15).abs() / 1e-15 < 1e-6);
    }

    #[test]
    fn tails_are_finite() {
        assert!(ln_cdf(-30.0).is_finite());
        assert!(ln_sf(30.0).is_finite());
        assert!((cdf(0.0) - 0.5).abs() < 1e-16);
    }
}
