//! Order statistics of worker runtimes and the throughput objective
//! `Omega(c) = c / x_(c)`.
//!
//! Three routes to the expected order statistics are provided: adaptive
//! quadrature of the exact iid-Gaussian integral, the Elfving closed-form
//! approximation, and Monte Carlo over an arbitrary joint sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::normal;

/// Runtimes sorted ascending, `x_(1) <= ... <= x_(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedRuntimes {
    values: Vec<f64>,
}

impl SortedRuntimes {
    /// Sorts `values`; every entry must be finite and positive.
    pub fn from_unsorted(mut values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("runtime {v} is not positive")));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The `c`-th smallest runtime, 1-indexed.
    pub fn get(&self, c: usize) -> Option<f64> {
        c.checked_sub(1).and_then(|i| self.values.get(i)).copied()
    }
}

/// The chosen cutoff and the runtimes backing it.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffDecision {
    pub c: usize,
    /// `c / predicted_sorted[c]`.
    pub throughput: f64,
    pub predicted_sorted: SortedRuntimes,
}

/// `c / x_(c)` for 1-indexed `c`.
pub fn throughput(sorted: &SortedRuntimes, c: usize) -> Result<f64> {
    sorted
        .get(c)
        .map(|x| c as f64 / x)
        .ok_or_else(|| Error::Domain(format!("cutoff {c} outside 1..={}", sorted.len())))
}

/// Index of the maximum over `scores[c_min-1..]`, ties going to the larger
/// index. Returns a 1-indexed cutoff.
pub(crate) fn argmax_cutoff(scores: &[f64], c_min: usize) -> usize {
    let mut best = c_min;
    for c in c_min..=scores.len() {
        if scores[c - 1] >= scores[best - 1] {
            best = c;
        }
    }
    best
}

/// The `c` in `[c_min, n]` maximizing throughput; ties resolve to the larger `c`.
pub fn optimal_cutoff(sorted: &SortedRuntimes, c_min: usize) -> Result<CutoffDecision> {
    let n = sorted.len();
    if n == 0 {
        return Err(Error::Domain("no runtimes to choose a cutoff from".into()));
    }
    if c_min == 0 || c_min > n {
        return Err(Error::Domain(format!("c_min {c_min} outside 1..={n}")));
    }
    let scores: Vec<f64> = (1..=n).map(|c| c as f64 / sorted.values[c - 1]).collect();
    let c = argmax_cutoff(&scores, c_min);
    Ok(CutoffDecision {
        c,
        throughput: scores[c - 1],
        predicted_sorted: sorted.clone(),
    })
}

fn check_rank(n: usize, j: usize) -> Result<()> {
    if j == 0 || j > n {
        return Err(Error::Domain(format!("order statistic rank {j} outside 1..={n}")));
    }
    Ok(())
}

/// `E[x_(j)]` for `n` iid `N(mu, sigma^2)` draws, by adaptive quadrature of
/// `Z(n,j) * integral x Phi^(j-1) (1-Phi)^(n-j) phi dx`.
///
/// The integral runs over the standardized range `[-10, 10]`; `Z(n,j)` and the
/// powers are combined in log space so large `n` does not overflow.
pub fn gaussian_order_stat_expectation(n: usize, j: usize, mu: f64, sigma: f64) -> Result<f64> {
    check_rank(n, j)?;
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(mu);
    }
    let (nf, jf) = (n as f64, j as f64);
    let ln_z = ln_gamma(nf + 1.0) - ln_gamma(jf) - ln_gamma(nf - jf + 1.0);
    let density = |u: f64| -> f64 {
        let mut ln = ln_z + normal::ln_pdf(u);
        if j > 1 {
            ln += (jf - 1.0) * normal::ln_cdf(u);
        }
        if j < n {
            ln += (nf - jf) * normal::ln_sf(u);
        }
        ln.exp()
    };
    let standardized = adaptive_simpson(&|u| u * density(u), -10.0, 10.0, 1e-11, 60);
    Ok(mu + sigma * standardized)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    // Seed with a fixed grid so narrow peaks near the upper tail are not missed.
    const PANELS: usize = 64;
    let h = (b - a) / PANELS as f64;
    (0..PANELS)
        .map(|i| {
            let lo = a + i as f64 * h;
            let hi = lo + h;
            let (flo, fmid, fhi) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
            simpson_step(f, lo, hi, flo, fmid, fhi, whole, tol / PANELS as f64, depth)
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Elfving's approximation `mu + Phi^-1((j - pi/8) / (n - pi/4 + 1)) * sigma`.
pub fn elfving_expectation(n: usize, j: usize, mu: f64, sigma: f64) -> Result<f64> {
    check_rank(n, j)?;
    if n < 2 {
        return Err(Error::Domain("Elfving's formula needs n >= 2".into()));
    }
    let p = elfving_quantile(n, j);
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile argument {p} outside (0, 1)")));
    }
    if sigma == 0.0 {
        return Ok(mu);
    }
    Ok(mu + normal::inv_cdf(p) * sigma)
}

fn elfving_quantile(n: usize, j: usize) -> f64 {
    use std::f64::consts::PI;
    (j as f64 - PI / 8.0) / (n as f64 - PI / 4.0 + 1.0)
}

/// Average idle time under full synchronization, `E[x_(n)] - E[x_(floor(n/2))]`.
pub fn expected_idle_time(n: usize, mu: f64, sigma: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::Domain("idle time needs at least two workers".into()));
    }
    Ok(elfving_expectation(n, n, mu, sigma)? - elfving_expectation(n, n / 2, mu, sigma)?)
}

/// Per-rank sample mean and standard deviation of sorted draws.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderStatSummary {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub n_samples: usize,
}

impl OrderStatSummary {
    /// Accumulates per-rank moments from already-sorted sample vectors.
    pub fn from_sorted_samples<'a>(samples: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in samples {
            if count == 0 {
                sum = vec![0.0; s.len()];
                sum_sq = vec![0.0; s.len()];
            } else if s.len() != sum.len() {
                return Err(Error::shape("order statistic sample", sum.len(), s.len()));
            }
            for (i, &v) in s.iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::InsufficientData("no samples".into()));
        }
        let k = count as f64;
        let means: Vec<f64> = sum.iter().map(|s| s / k).collect();
        let stds = sum_sq
            .iter()
            .zip(&means)
            .map(|(sq, m)| {
                if count < 2 {
                    0.0
                } else {
                    ((sq - k * m * m) / (k - 1.0)).max(0.0).sqrt()
                }
            })
            .collect();
        Ok(Self {
            means,
            stds,
            n_samples: count,
        })
    }
}

/// Monte Carlo order statistics: draw joint runtime vectors, sort, record.
///
/// `sampler` receives a generator seeded from `seed`, so results are
/// reproducible.
pub fn monte_carlo_order_stats<F>(mut sampler: F, n_samples: usize, seed: u64) -> Result<OrderStatSummary>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<f64>,
{
    if n_samples < 2 {
        return Err(Error::Domain(
            "Monte Carlo order statistics need at least 2 samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut draw = sampler(&mut rng);
        if draw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "sampler produced a non-finite value in sample {i}"
            )));
        }
        draw.sort_by(f64::total_cmp);
        sorted.push(draw);
    }
    OrderStatSummary::from_sorted_samples(sorted.iter().map(Vec::as_slice))
}
