//! Synthetic cluster runtimes with time- and group-correlated contention and
//! piecewise regimes, plus replay of recorded traces.
//!
//! Within a regime, worker `j` in group `g` at iteration `t` takes
//!
//! ```text
//! base_mean_j * m_g + s_g(t) + base_std_j * eps_jt,   clamped to >= 1e-3 s
//! s_g(t) = a * s_g(t-1) + sqrt(1 - a^2) * group_std * eta_gt
//! ```
//!
//! where `m_g` is the slow multiplier for slow groups and 1 otherwise. Values
//! are quantized to nanoseconds so traces round-trip through text.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{quantize, RuntimeTrace};

pub const MIN_RUNTIME: f64 = 1e-3;
pub const DEFAULT_AR: f64 = 0.9;

/// Fully resolved description of one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSpec {
    pub start_iteration: usize,
    pub base_mean: Vec<f64>,
    /// Independent per-worker noise std.
    pub base_std: Vec<f64>,
    /// Group index of each worker; groups are numbered `0..k` without gaps.
    pub group_of: Vec<usize>,
    pub group_std: f64,
    pub slow_groups: Vec<usize>,
    pub slow_multiplier: f64,
}

impl RegimeSpec {
    pub fn n_groups(&self) -> usize {
        self.group_of.iter().max().map_or(0, |m| m + 1)
    }

    fn validate(&self, n: usize, index: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("regime {index}: {m}")));
        if self.base_mean.len() != n || self.base_std.len() != n || self.group_of.len() != n {
            return bad(format!("per-worker fields must have {n} entries"));
        }
        if self.base_mean.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return bad("base means must be positive".into());
        }
        if self
            .base_std
            .iter()
            .chain([&self.group_std])
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return bad("noise stds must be non-negative".into());
        }
        let k = self.n_groups();
        let mut seen = vec![false; k];
        self.group_of.iter().for_each(|&g| seen[g] = true);
        if seen.contains(&false) {
            return bad("group indices must cover 0..k without gaps".into());
        }
        if let Some(g) = self.slow_groups.iter().find(|&&g| g >= k) {
            return bad(format!("slow group {g} does not exist"));
        }
        if !(self.slow_multiplier > 0.0 && self.slow_multiplier.is_finite()) {
            return bad("slow multiplier must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub n_workers: usize,
    pub iterations: usize,
    pub regimes: Vec<RegimeSpec>,
    pub seed: u64,
    pub ar_coefficient: f64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 || self.iterations == 0 {
            return Err(Error::Config("need at least one worker and one iteration".into()));
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return Err(Error::Config(format!(
                "AR coefficient {} outside [0, 1)",
                self.ar_coefficient
            )));
        }
        match self.regimes.first() {
            Some(r) if r.start_iteration == 0 => {}
            _ => return Err(Error::Config("first regime must start at iteration 0".into())),
        }
        for (i, pair) in self.regimes.windows(2).enumerate() {
            if pair[1].start_iteration <= pair[0].start_iteration {
                return Err(Error::Config(format!(
                    "regime {} does not start after regime {i}",
                    i + 1
                )));
            }
        }
        for (i, r) in self.regimes.iter().enumerate() {
            r.validate(self.n_workers, i)?;
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: SimFile = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        file.resolve()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Worker-indexed value given either once for all workers or per worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerWorker {
    All(f64),
    Each(Vec<f64>),
}

impl PerWorker {
    fn resolve(&self, n: usize) -> Vec<f64> {
        match self {
            PerWorker::All(v) => vec![*v; n],
            PerWorker::Each(v) => v.clone(),
        }
    }
}

/// `groups = 4` splits workers into contiguous near-equal groups;
/// `groups = [40, 40, 40, 38]` gives contiguous groups of those sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupLayout {
    Count(usize),
    Sizes(Vec<usize>),
}

impl GroupLayout {
    pub fn assignment(&self, n: usize) -> Result<Vec<usize>> {
        let sizes = match self {
            GroupLayout::Count(0) => return Err(Error::Config("group count must be positive".into())),
            GroupLayout::Count(k) => (0..*k).map(|g| n / k + usize::from(g < n % k)).collect(),
            GroupLayout::Sizes(s) => s.clone(),
        };
        if sizes.iter().sum::<usize>() != n || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "group sizes {sizes:?} do not partition {n} workers"
            )));
        }
        Ok(sizes
            .iter()
            .enumerate()
            .flat_map(|(g, &s)| std::iter::repeat_n(g, s))
            .collect())
    }
}

/// Declarative form read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub start_iteration: usize,
    pub base_mean: PerWorker,
    pub base_std: PerWorker,
    pub groups: GroupLayout,
    #[serde(default)]
    pub group_std: f64,
    #[serde(default)]
    pub slow_groups: Vec<usize>,
    #[serde(default = "one")]
    pub slow_multiplier: f64,
}

fn one() -> f64 {
    1.0
}

fn default_ar() -> f64 {
    DEFAULT_AR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimFile {
    pub n_workers: usize,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ar")]
    pub ar_coefficient: f64,
    #[serde(rename = "regime")]
    pub regimes: Vec<RegimeConfig>,
}

impl SimFile {
    pub fn resolve(&self) -> Result<SimSpec> {
        let n = self.n_workers;
        let regimes = self
            .regimes
            .iter()
            .map(|r| {
                Ok(RegimeSpec {
                    start_iteration: r.start_iteration,
                    base_mean: r.base_mean.resolve(n),
                    base_std: r.base_std.resolve(n),
                    group_of: r.groups.assignment(n)?,
                    group_std: r.group_std,
                    slow_groups: r.slow_groups.clone(),
                    slow_multiplier: r.slow_multiplier,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = SimSpec {
            n_workers: n,
            iterations: self.iterations,
            regimes,
            seed: self.seed,
            ar_coefficient: self.ar_coefficient,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn simulate_trace(spec: &SimSpec) -> Result<RuntimeTrace> {
    spec.validate()?;
    let n = spec.n_workers;
    let a = spec.ar_coefficient;
    let innovation = (1.0 - a * a).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut group_state: Vec<f64> = Vec::new();
    let mut regime_idx = 0;
    let mut rows = Vec::with_capacity(spec.iterations);
    for t in 0..spec.iterations {
        while regime_idx + 1 < spec.regimes.len() && spec.regimes[regime_idx + 1].start_iteration <= t {
            regime_idx += 1;
        }
        let r = &spec.regimes[regime_idx];
        let k = r.n_groups();
        // Existing groups continue their AR path; new ones start stationary.
        group_state.truncate(k);
        for s in group_state.iter_mut() {
            let eta: f64 = rng.sample(StandardNormal);
            *s = a * *s + innovation * r.group_std * eta;
        }
        while group_state.len() < k {
            let eta: f64 = rng.sample(StandardNormal);
            group_state.push(r.group_std * eta);
        }
        let row = (0..n)
            .map(|j| {
                let g = r.group_of[j];
                let mult = if r.slow_groups.contains(&g) {
                    r.slow_multiplier
                } else {
                    1.0
                };
                let eps: f64 = rng.sample(StandardNormal);
                quantize((r.base_mean[j] * mult + group_state[g] + r.base_std[j] * eps).max(MIN_RUNTIME))
            })
            .collect();
        rows.push(row);
    }
    RuntimeTrace::new(n, rows)
}

/// Iteration-indexed runtime rows.
pub trait RuntimeSource {
    fn n_workers(&self) -> usize;
    /// The next row, or `None` once exhausted.
    fn next_row(&mut self) -> Option<Vec<f64>>;
}

/// Restartable cursor over a recorded trace.
#[derive(Debug, Clone)]
pub struct Replay {
    trace: RuntimeTrace,
    pos: usize,
}

impl Replay {
    pub fn new(trace: RuntimeTrace) -> Self {
        Self { trace, pos: 0 }
    }

    pub fn restart(&mut self) {
        self.pos = 0;
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.trace.len() - self.pos
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining() == 0
    }

    pub fn trace(&self) -> &RuntimeTrace {
        &self.trace
    }
}

impl RuntimeSource for Replay {
    fn n_workers(&self) -> usize {
        self.trace.n_workers()
    }

    fn next_row(&mut self) -> Option<Vec<f64>> {
        let row = self.trace.row(self.pos)?.to_vec();
        self.pos += 1;
        Some(row)
    }
}

pub fn replay(trace: RuntimeTrace) -> Replay {
    Replay::new(trace)
}

pub const PRESET_NAMES: [&str; 4] = ["two-regime-158", "straggler-158", "train-158", "two-regime-16"];

/// Regime where `slow` groups run at `mult` times the base mean.
#[allow(clippy::too_many_arguments)]
fn uniform_regime(
    start: usize,
    n: usize,
    sizes: &[usize],
    mean: f64,
    std: f64,
    group_std: f64,
    slow: &[usize],
    mult: f64,
) -> RegimeSpec {
    RegimeSpec {
        start_iteration: start,
        base_mean: vec![mean; n],
        base_std: vec![std; n],
        group_of: GroupLayout::Sizes(sizes.to_vec())
            .assignment(n)
            .expect("preset groups partition workers"),
        group_std,
        slow_groups: slow.to_vec(),
        slow_multiplier: mult,
    }
}

/// Alternates slow-group-0 and uniform regimes at the given boundaries,
/// starting slow.
fn alternating(
    n: usize,
    sizes: &[usize],
    iterations: usize,
    boundaries: &[usize],
    seed: u64,
    noise: (f64, f64),
) -> SimSpec {
    let regimes = std::iter::once(0)
        .chain(boundaries.iter().copied())
        .enumerate()
        .map(|(i, start)| {
            let slow: &[usize] = if i % 2 == 0 { &[0] } else { &[] };
            uniform_regime(start, n, sizes, PRESET_MEAN, noise.0, noise.1, slow, PRESET_SLOWDOWN)
        })
        .collect();
    SimSpec {
        n_workers: n,
        iterations,
        regimes,
        seed,
        ar_coefficient: DEFAULT_AR,
    }
}

const NODES_158: [usize; 4] = [40, 40, 40, 38];
const PRESET_MEAN: f64 = 1.0;
// Per-worker and per-node std. Small enough next to the mean that the
// fastest of 158 workers stays well clear of the clamp.
const NOISE_158: (f64, f64) = (0.15, 0.15);
// Sixteen workers never get near the clamp, so per-worker noise can be wider.
const NOISE_16: (f64, f64) = (0.3, 0.1);
const PRESET_SLOWDOWN: f64 = 2.5;

/// Named scenarios.
///
/// * `two-regime-158`: 158 workers on four nodes; node 0 runs at 2.5x until
///   iteration 61, then all nodes are alike. 200 iterations.
/// * `straggler-158`: node 0 stays at 2.5x throughout. 1000 iterations.
/// * `train-158`: 2000 iterations alternating between the two modes, for
///   fitting the runtime model.
/// * `two-regime-16`: 16 workers on four nodes, 2000 alternating iterations,
///   with wider per-worker noise.
pub fn preset(name: &str) -> Option<SimSpec> {
    let spec = match name {
        "two-regime-158" => alternating(158, &NODES_158, 200, &[61], 1, NOISE_158),
        "straggler-158" => alternating(158, &NODES_158, 1000, &[], 2, NOISE_158),
        "train-158" => alternating(
            158,
            &NODES_158,
            2000,
            &[
                61, 240, 330, 520, 650, 800, 870, 1060, 1200, 1330, 1420, 1610, 1700, 1880,
            ],
            3,
            NOISE_158,
        ),
        "two-regime-16" => alternating(
            16,
            &[4, 4, 4, 4],
            2000,
            &[
                61, 240, 330, 520, 650, 800, 870, 1060, 1200, 1330, 1420, 1610, 1700, 1880,
            ],
            4,
            NOISE_16,
        ),
        _ => return None,
    };
    Some(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orderstats::gaussian_order_stat_expectation;

    fn quiet(n: usize, iterations: usize) -> SimSpec {
        SimSpec {
            n_workers: n,
            iterations,
            regimes: vec![RegimeSpec {
                start_iteration: 0,
                base_mean: (0..n).map(|j| 1.0 + 0.25 * j as f64).collect(),
                base_std: vec![0.0; n],
                group_of: vec![0; n],
                group_std: 0.0,
                slow_groups: vec![],
                slow_multiplier: 1.0,
            }],
            seed: 3,
            ar_coefficient: 0.9,
        }
    }

    #[test]
    fn zero_noise_is_constant() {
        let t = simulate_trace(&quiet(4, 10)).unwrap();
        for row in t.rows() {
            assert_eq!(row, &[1.0, 1.25, 1.5, 1.75]);
        }
    }

    #[test]
    fn zero_noise_is_piecewise_constant() {
        let mut spec = quiet(2, 8);
        let mut second = spec.regimes[0].clone();
        second.start_iteration = 5;
        second.base_mean = vec![3.0, 4.0];
        spec.regimes.push(second);
        let t = simulate_trace(&spec).unwrap();
        assert_eq!(t.row(4).unwrap(), &[1.0, 1.25]);
        assert_eq!(t.row(5).unwrap(), &[3.0, 4.0]);
        assert_eq!(t.row(7).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn shared_group_noise_moves_groups_together() {
        let mut spec = quiet(6, 50);
        spec.regimes[0].base_mean = vec![1.0; 6];
        spec.regimes[0].group_of = vec![0, 0, 0, 1, 1, 1];
        spec.regimes[0].group_std = 0.2;
        let t = simulate_trace(&spec).unwrap();
        let mut differ = 0;
        for row in t.rows() {
            assert!(row[0] == row[1] && row[1] == row[2]);
            assert!(row[3] == row[4] && row[4] == row[5]);
            differ += usize::from(row[0] != row[3]);
        }
        assert_eq!(differ, 50);
    }

    #[test]
    fn slow_group_mean_halves_after_switch() {
        let mut spec = preset("two-regime-158").unwrap().with_iterations(400);
        for r in &mut spec.regimes {
            r.group_std = 0.02;
            r.slow_multiplier = 2.0;
        }
        let t = simulate_trace(&spec).unwrap();
        let mean = |rows: &[Vec<f64>]| {
            rows.iter().map(|r| r[..40].iter().sum::<f64>()).sum::<f64>() / (40 * rows.len()) as f64
        };
        let ratio = mean(&t.rows()[..61]) / mean(&t.rows()[61..]);
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let spec = preset("two-regime-16").unwrap().with_iterations(50);
        assert_eq!(simulate_trace(&spec).unwrap(), simulate_trace(&spec).unwrap());
        assert_ne!(
            simulate_trace(&spec).unwrap(),
            simulate_trace(&spec.clone().with_seed(9)).unwrap()
        );
    }

    #[test]
    fn traces_round_trip_through_text() {
        let t = simulate_trace(&preset("two-regime-16").unwrap().with_iterations(30)).unwrap();
        assert_eq!(RuntimeTrace::from_text(&t.to_text().unwrap()).unwrap(), t);
    }

    #[test]
    fn iid_maxima_match_quadrature() {
        let n = 158;
        let mut spec = quiet(n, 4000);
        spec.regimes[0].base_mean = vec![1.057; n];
        spec.regimes[0].base_std = vec![0.393; n];
        let t = simulate_trace(&spec).unwrap();
        let maxima: Vec<f64> = t
            .rows()
            .iter()
            .map(|r| r.iter().copied().fold(f64::MIN, f64::max))
            .collect();
        let m = maxima.iter().sum::<f64>() / maxima.len() as f64;
        let sd = (maxima.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (maxima.len() - 1) as f64).sqrt();
        let exact = gaussian_order_stat_expectation(n, n, 1.057, 0.393).unwrap();
        assert!(
            (m - exact).abs() < 3.0 * sd / (maxima.len() as f64).sqrt(),
            "{m} vs {exact}"
        );
    }

    #[test]
    fn toml_config_resolves() {
        let text = r#"
n_workers = 6
iterations = 20
seed = 5

[[regime]]
start_iteration = 0
base_mean = 1.0
base_std = [0.1, 0.1, 0.1, 0.2, 0.2, 0.2]
groups = [3, 3]
group_std = 0.05
slow_groups = [1]
slow_multiplier = 2.0

[[regime]]
start_iteration = 10
base_mean = 1.0
base_std = 0.1
groups = 2
"#;
        let spec = SimSpec::from_toml(text).unwrap();
        assert_eq!(spec.ar_coefficient, DEFAULT_AR);
        assert_eq!(spec.regimes[0].group_of, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(spec.regimes[1].slow_multiplier, 1.0);
        assert_eq!(simulate_trace(&spec).unwrap().len(), 20);

        let bad = text.replace("start_iteration = 10", "start_iteration = 0");
        assert!(matches!(SimSpec::from_toml(&bad), Err(Error::Config(_))));
        let bad = text.replace("groups = [3, 3]", "groups = [3, 2]");
        assert!(SimSpec::from_toml(&bad).is_err());
        let bad = text.replace("slow_groups = [1]", "slow_groups = [4]");
        assert!(SimSpec::from_toml(&bad).is_err());
    }

    #[test]
    fn presets_are_valid() {
        for name in PRESET_NAMES {
            let spec = preset(name).unwrap();
            spec.validate().unwrap();
        }
        assert!(preset("nope").is_none());
        assert_eq!(preset("two-regime-158").unwrap().regimes[1].start_iteration, 61);
    }

    #[test]
    fn presets_stay_clear_of_the_clamp() {
        for name in PRESET_NAMES {
            let t = simulate_trace(&preset(name).unwrap()).unwrap();
            let values = t.rows().iter().flatten();
            let total = (t.len() * t.n_workers()) as f64;
            let clamped = values.clone().filter(|&&v| v <= MIN_RUNTIME).count();
            if t.n_workers() > 100 {
                assert!((clamped as f64) < 1e-5 * total, "{name}: {clamped}");
                let low = values.filter(|&&v| v < 0.1).count();
                assert!((low as f64) < 1e-4 * total, "{name}: {low}");
            } else {
                assert!((clamped as f64) < 1e-3 * total, "{name}: {clamped}");
            }
        }
    }

    #[test]
    fn replay_yields_rows_then_exhausts_and_restarts() {
        let t = RuntimeTrace::new(2, vec![vec![1.0, 2.0], vec![0.1 + 0.2, 3.0], vec![4.0, 5.0]]).unwrap();
        let mut r = replay(t.clone());
        let first: Vec<Vec<f64>> = std::iter::from_fn(|| r.next_row()).collect();
        assert_eq!(first, t.rows());
        assert!(r.is_exhausted());
        assert_eq!(r.next_row(), None);
        r.restart();
        let second: Vec<Vec<f64>> = std::iter::from_fn(|| r.next_row()).collect();
        assert_eq!(first, second);
    }
}
