//! Posterior-predictive runtime forecasts, cutoff selection, and imputation
//! of censored straggler runtimes.
//!
//! Given the last `lag` runtime vectors, `K` latent paths are drawn from the
//! guide; each final state is pushed through the transition and emission to
//! give one mixture component and one sampled joint runtime vector.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dmm::GaussianVector;
use crate::error::{Error, Result};
use crate::ndmath::{Tape, Var};
use crate::normal;
use crate::orderstats::{argmax_cutoff, CutoffDecision, OrderStatSummary, SortedRuntimes};
use crate::seed;
use crate::trace::{LagWindow, NormalizationSpec, RuntimeTrace};
use crate::trainer::{ModelCheckpoint, RuntimeModel};

/// Floor applied to sampled runtimes, in seconds.
pub const RUNTIME_FLOOR: f64 = 1e-6;
pub const DEFAULT_K: usize = 50;
/// Censor points further than this many predictive stds above the mean are
/// imputed deterministically.
pub const TAIL_FALLBACK_SIGMAS: f64 = 6.0;
pub const FALLBACK_FACTOR: f64 = 1.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    /// Emission distribution of each of the `K` components, normalized units.
    pub components: Vec<GaussianVector>,
    /// Per-worker moments of the equal-weight mixture, normalized units.
    pub marginal: GaussianVector,
    /// `K` sampled joint runtime vectors in seconds.
    pub samples: Vec<Vec<f64>>,
    pub normalization: NormalizationSpec,
}

impl PredictiveDistribution {
    fn from_components(
        components: Vec<GaussianVector>,
        samples: Vec<Vec<f64>>,
        normalization: NormalizationSpec,
    ) -> Self {
        let k = components.len() as f64;
        let n = components[0].dim();
        let mut mean = vec![0.0; n];
        let mut second = vec![0.0; n];
        for c in &components {
            for j in 0..n {
                mean[j] += c.mean[j] / k;
                second[j] += (c.std[j] * c.std[j] + c.mean[j] * c.mean[j]) / k;
            }
        }
        let std = second
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s - m * m).max(0.0).sqrt().max(f64::MIN_POSITIVE))
            .collect();
        Self {
            components,
            marginal: GaussianVector { mean, std },
            samples,
            normalization,
        }
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn n_workers(&self) -> usize {
        self.marginal.dim()
    }

    pub fn mean_seconds(&self) -> Vec<f64> {
        self.marginal
            .mean
            .iter()
            .map(|&m| self.normalization.invert(m))
            .collect()
    }

    pub fn std_seconds(&self) -> Vec<f64> {
        self.marginal
            .std
            .iter()
            .map(|&s| self.normalization.invert(s))
            .collect()
    }

    /// Mixture log-density of a runtime vector given in seconds.
    pub fn log_density(&self, x_seconds: &[f64]) -> Result<f64> {
        if x_seconds.len() != self.n_workers() {
            return Err(Error::shape("runtime vector", self.n_workers(), x_seconds.len()));
        }
        let x: Vec<f64> = x_seconds.iter().map(|&v| self.normalization.apply(v)).collect();
        let logs: Vec<f64> = self.components.iter().map(|c| c.log_pdf(&x)).collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        let jacobian = x.len() as f64 * self.normalization.scale.ln();
        Ok(lse - (self.components.len() as f64).ln() - jacobian)
    }

    /// Per-rank means and stds of the sorted sample vectors.
    pub fn predicted_order_stats(&self) -> Result<OrderStatSummary> {
        let sorted: Vec<Vec<f64>> = self.samples.iter().map(|s| sorted_copy(s)).collect();
        OrderStatSummary::from_sorted_samples(sorted.iter().map(Vec::as_slice))
    }
}

fn sorted_copy(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryFlag {
    Observed,
    Imputed,
    /// Censor point was too far in the predictive tail; value is
    /// `cutoff_time * 1.01`.
    ImputedFallback,
}

/// Rolling window of the most recent `lag` runtime vectors, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBuffer {
    lag: usize,
    n_workers: usize,
    rows: VecDeque<Vec<f64>>,
    flags: VecDeque<Vec<EntryFlag>>,
}

impl ObservationBuffer {
    pub fn new(lag: usize, n_workers: usize) -> Result<Self> {
        if lag == 0 || n_workers == 0 {
            return Err(Error::Domain("buffer needs positive lag and worker count".into()));
        }
        Ok(Self {
            lag,
            n_workers,
            rows: VecDeque::with_capacity(lag + 1),
            flags: VecDeque::with_capacity(lag + 1),
        })
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.rows.len() == self.lag
    }

    /// Oldest first.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(Vec::as_slice)
    }

    pub fn flags(&self) -> impl Iterator<Item = &[EntryFlag]> {
        self.flags.iter().map(Vec::as_slice)
    }

    pub fn latest(&self) -> Option<&[f64]> {
        self.rows.back().map(Vec::as_slice)
    }

    /// Appends a row, evicting the oldest once more than `lag` are held.
    pub fn push(&mut self, values: Vec<f64>, flags: Vec<EntryFlag>) -> Result<()> {
        if values.len() != self.n_workers || flags.len() != self.n_workers {
            return Err(Error::Domain(format!(
                "buffer row needs {} values and flags, got {} and {}",
                self.n_workers,
                values.len(),
                flags.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("buffer entries must be positive, got {v}")));
        }
        self.rows.push_back(values);
        self.flags.push_back(flags);
        if self.rows.len() > self.lag {
            self.rows.pop_front();
            self.flags.pop_front();
        }
        Ok(())
    }

    /// Buffer contents as a window in seconds.
    pub fn window(&self) -> Result<LagWindow> {
        LagWindow::new(self.rows.iter().cloned().collect())
    }
}

/// Functional form of [`ObservationBuffer::push`].
pub fn advance_buffer(
    mut buffer: ObservationBuffer,
    values: Vec<f64>,
    flags: Vec<EntryFlag>,
) -> Result<ObservationBuffer> {
    buffer.push(values, flags)?;
    Ok(buffer)
}

/// Source of standard-normal draws for the prediction pass.
enum Noise<'a> {
    Random(&'a mut ChaCha8Rng),
    Zero,
}

impl Noise<'_> {
    fn vector(&mut self, d: usize) -> Vec<f64> {
        match self {
            Noise::Random(rng) => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
            Noise::Zero => vec![0.0; d],
        }
    }
}

/// A loaded checkpoint ready for repeated prediction.
#[derive(Debug, Clone)]
pub struct Predictor {
    ckpt: ModelCheckpoint,
    model: RuntimeModel,
}

impl Predictor {
    pub fn new(ckpt: ModelCheckpoint) -> Result<Self> {
        ckpt.validate()?;
        let model = ckpt.model()?;
        Ok(Self { ckpt, model })
    }

    pub fn checkpoint(&self) -> &ModelCheckpoint {
        &self.ckpt
    }

    pub fn lag(&self) -> usize {
        self.ckpt.lag
    }

    pub fn n_workers(&self) -> usize {
        self.ckpt.n_workers()
    }

    pub fn new_buffer(&self) -> ObservationBuffer {
        ObservationBuffer::new(self.lag(), self.n_workers()).expect("checkpoint dimensions are positive")
    }

    fn check_buffer(&self, buffer: &ObservationBuffer) -> Result<()> {
        if buffer.n_workers() != self.n_workers() {
            return Err(Error::Domain(format!(
                "buffer tracks {} workers, model expects {}",
                buffer.n_workers(),
                self.n_workers()
            )));
        }
        if buffer.len() < self.lag() {
            return Err(Error::InsufficientData(format!(
                "prediction needs {} buffered iterations, have {}",
                self.lag(),
                buffer.len()
            )));
        }
        Ok(())
    }

    fn normalized_window(&self, buffer: &ObservationBuffer) -> Vec<Vec<f64>> {
        let spec = self.ckpt.normalization;
        buffer
            .rows()
            .map(|r| r.iter().map(|&v| spec.apply(v)).collect())
            .collect()
    }

    /// Runs `k` guide paths over a normalized window. The recurrent context is
    /// shared across paths.
    fn predict_normalized(
        &self,
        window: &[Vec<f64>],
        k: usize,
        mut noise: Noise<'_>,
    ) -> Result<PredictiveDistribution> {
        if k == 0 {
            return Err(Error::Domain("K must be at least 1".into()));
        }
        let (dmm, guide) = (&self.model.dmm, &self.model.guide);
        let d = dmm.config().d_z;
        let theta = &self.ckpt.theta;
        let mut tape = Tape::new();
        let tb = tape.bind(theta);
        let pb = tape.bind(&self.ckpt.phi);
        let xs: Vec<Var> = window.iter().map(|r| tape.constant(r.clone())).collect();
        let context = guide.context_on_tape(&mut tape, &pb, &xs)?;
        let (z_init, _) = dmm.initial_on_tape(&mut tape, &tb)?;

        let mut components = Vec::with_capacity(k);
        let mut samples = Vec::with_capacity(k);
        for _ in 0..k {
            let mut z_prev = z_init;
            for ctx in &context {
                let (m, s) = guide.step_on_tape(&mut tape, &pb, z_prev, *ctx)?;
                z_prev = tape.reparam(m, s, noise.vector(d))?;
            }
            let z_last = tape.value(z_prev).to_vec();
            let trans = dmm.transition(theta, &z_last)?;
            let eps = noise.vector(d);
            let z_next: Vec<f64> = trans
                .mean
                .iter()
                .zip(&trans.std)
                .zip(&eps)
                .map(|((m, s), e)| m + s * e)
                .collect();
            let emission = dmm.emission(theta, &z_next)?;
            let e = noise.vector(emission.dim());
            let x: Vec<f64> = emission
                .mean
                .iter()
                .zip(&emission.std)
                .zip(&e)
                .map(|((m, s), e)| self.ckpt.normalization.invert(m + s * e).max(RUNTIME_FLOOR))
                .collect();
            if x.iter().any(|v| !v.is_finite()) || emission.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Model("prediction produced a non-finite runtime".into()));
            }
            components.push(emission);
            samples.push(x);
        }
        Ok(PredictiveDistribution::from_components(
            components,
            samples,
            self.ckpt.normalization,
        ))
    }

    /// `K`-sample posterior predictive for the iteration after the buffer.
    pub fn predict_next(&self, buffer: &ObservationBuffer, k: usize, seed: u64) -> Result<PredictiveDistribution> {
        self.check_buffer(buffer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.predict_normalized(&self.normalized_window(buffer), k, Noise::Random(&mut rng))
    }

    /// Prediction with every noise draw set to zero: the guide mean path, the
    /// transition mean, and the emission mean.
    pub fn predict_noiseless(&self, buffer: &ObservationBuffer) -> Result<PredictiveDistribution> {
        self.check_buffer(buffer)?;
        self.predict_normalized(&self.normalized_window(buffer), 1, Noise::Zero)
    }

    /// Same as [`Self::predict_next`] for a window already in model units.
    pub fn predict_from_normalized(&self, window: &LagWindow, k: usize, seed: u64) -> Result<PredictiveDistribution> {
        if window.lag() != self.lag() || window.n_workers() != self.n_workers() {
            return Err(Error::Domain(
                "window does not match the checkpoint's lag and worker count".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.predict_normalized(window.rows(), k, Noise::Random(&mut rng))
    }

    pub fn predict_cutoff(
        &self,
        buffer: &ObservationBuffer,
        k: usize,
        c_min: usize,
        seed: u64,
    ) -> Result<CutoffDecision> {
        let pred = self.predict_next(buffer, k, seed)?;
        choose_cutoff(&pred.samples, c_min)
    }
}

/// Monte Carlo mean of `c / x_(c)` over sample vectors, for `c = 1..=n`.
pub fn expected_throughput_curve(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = samples.first() else {
        return Err(Error::InsufficientData("no sampled runtime vectors".into()));
    };
    let n = first.len();
    let mut curve = vec![0.0; n];
    for s in samples {
        if s.len() != n {
            return Err(Error::shape("sampled runtime vector", n, s.len()));
        }
        for (i, x) in sorted_copy(s).iter().enumerate() {
            curve[i] += (i + 1) as f64 / x;
        }
    }
    let k = samples.len() as f64;
    curve.iter_mut().for_each(|v| *v /= k);
    Ok(curve)
}

/// Picks the `c >= c_min` maximizing the sample-mean throughput, ties to the
/// larger `c`. The decision's sorted vector holds the per-rank sample means,
/// and its `throughput` is `c` over the mean `c`-th runtime.
pub fn choose_cutoff(samples: &[Vec<f64>], c_min: usize) -> Result<CutoffDecision> {
    let curve = expected_throughput_curve(samples)?;
    let n = curve.len();
    if c_min == 0 || c_min > n {
        return Err(Error::Domain(format!("c_min {c_min} outside 1..={n}")));
    }
    let c = argmax_cutoff(&curve, c_min);
    let stats = OrderStatSummary::from_sorted_samples(
        samples
            .iter()
            .map(|s| sorted_copy(s))
            .collect::<Vec<_>>()
            .iter()
            .map(Vec::as_slice),
    )?;
    let predicted_sorted = SortedRuntimes::from_unsorted(stats.means)?;
    let throughput = c as f64 / predicted_sorted.get(c).expect("c is within range");
    Ok(CutoffDecision {
        c,
        throughput,
        predicted_sorted,
    })
}

pub fn predict_next(
    ckpt: &ModelCheckpoint,
    buffer: &ObservationBuffer,
    k: usize,
    seed: u64,
) -> Result<PredictiveDistribution> {
    Predictor::new(ckpt.clone())?.predict_next(buffer, k, seed)
}

pub fn predict_cutoff(
    ckpt: &ModelCheckpoint,
    buffer: &ObservationBuffer,
    k: usize,
    c_min: usize,
    seed: u64,
) -> Result<CutoffDecision> {
    Predictor::new(ckpt.clone())?.predict_cutoff(buffer, k, c_min, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeMode {
    /// Truncate a single Gaussian with the mixture's per-worker moments.
    #[default]
    Marginal,
    /// Pick a component in proportion to its tail mass, then truncate it.
    Mixture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub values: Vec<f64>,
    pub flags: Vec<EntryFlag>,
}

/// Draws `N(mean, std)` conditioned on exceeding `cutoff`, by inverting the
/// upper-tail probability. `None` when the cutoff is beyond the fallback
/// threshold.
fn truncated_draw(mean: f64, std: f64, cutoff: f64, u: f64) -> Option<f64> {
    let alpha = (cutoff - mean) / std;
    if !(alpha <= TAIL_FALLBACK_SIGMAS) {
        return None;
    }
    let tail = normal::sf(alpha);
    if tail < 1e-12 {
        return None;
    }
    // u in [0, 1) maps to q in (0, tail].
    let q = (1.0 - u) * tail;
    let x = mean + std * normal::inv_sf(q);
    Some(if x > cutoff { x } else { cutoff.next_up() })
}

/// Fills each censored (`None`) entry with a draw from its predictive
/// marginal truncated to `(cutoff_time, inf)`. Observed entries pass through.
pub fn impute_censored(
    pred: &PredictiveDistribution,
    observed: &[Option<f64>],
    cutoff_time: f64,
    seed: u64,
) -> Result<Imputation> {
    impute_censored_with(pred, observed, cutoff_time, seed, ImputeMode::Marginal)
}

pub fn impute_censored_with(
    pred: &PredictiveDistribution,
    observed: &[Option<f64>],
    cutoff_time: f64,
    seed: u64,
    mode: ImputeMode,
) -> Result<Imputation> {
    let n = pred.n_workers();
    if observed.len() != n {
        return Err(Error::shape("observed runtime vector", n, observed.len()));
    }
    if !(cutoff_time > 0.0 && cutoff_time.is_finite()) {
        return Err(Error::Domain(format!(
            "cutoff time must be positive, got {cutoff_time}"
        )));
    }
    if let Some(v) = observed.iter().flatten().find(|&&v| !(v > 0.0 && v <= cutoff_time)) {
        return Err(Error::Domain(format!(
            "observed runtime {v} is not in (0, {cutoff_time}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = pred.normalization;
    let mut values = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for (j, obs) in observed.iter().enumerate() {
        if let Some(v) = obs {
            values.push(*v);
            flags.push(EntryFlag::Observed);
            continue;
        }
        let (mean, std) = match mode {
            ImputeMode::Marginal => (pred.marginal.mean[j], pred.marginal.std[j]),
            ImputeMode::Mixture => {
                let c = spec.apply(cutoff_time);
                let masses: Vec<f64> = pred
                    .components
                    .iter()
                    .map(|g| normal::sf((c - g.mean[j]) / g.std[j]))
                    .collect();
                let total: f64 = masses.iter().sum();
                let pick = if total > 0.0 {
                    let mut r = rng.random::<f64>() * total;
                    masses
                        .iter()
                        .position(|&m| {
                            r -= m;
                            r < 0.0
                        })
                        .unwrap_or(masses.len() - 1)
                } else {
                    0
                };
                (pred.components[pick].mean[j], pred.components[pick].std[j])
            }
        };
        let u: f64 = rng.random();
        match truncated_draw(spec.invert(mean), spec.invert(std), cutoff_time, u) {
            Some(x) => {
                values.push(x);
                flags.push(EntryFlag::Imputed);
            }
            None => {
                values.push(cutoff_time * FALLBACK_FACTOR);
                flags.push(EntryFlag::ImputedFallback);
            }
        }
    }
    Ok(Imputation { values, flags })
}

/// One-step-ahead forecast of the sorted runtimes of `iteration`, made from
/// the `lag` observed rows before it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepForecast {
    pub iteration: usize,
    pub observed_sorted: Vec<f64>,
    /// Per-rank mean and std of the sorted predictive samples, seconds.
    pub predicted: OrderStatSummary,
    /// The previous row, sorted.
    pub carry_forward_sorted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastReport {
    pub steps: Vec<StepForecast>,
    pub rmse_model: f64,
    pub rmse_carry_forward: f64,
}

fn rmse<'a>(pairs: impl Iterator<Item = (&'a [f64], &'a [f64])>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, b) in pairs {
        for (x, y) in a.iter().zip(b) {
            sum += (x - y).powi(2);
            count += 1;
        }
    }
    (sum / count as f64).sqrt()
}

/// Forecasts every iteration in `start..end` of `trace` from the rows before
/// it and scores sorted predicted means and the carry-forward baseline
/// against the observed sorted rows.
pub fn one_step_forecasts(
    predictor: &Predictor,
    trace: &RuntimeTrace,
    start: usize,
    end: usize,
    k: usize,
    seed: u64,
) -> Result<ForecastReport> {
    let lag = predictor.lag();
    if trace.n_workers() != predictor.n_workers() {
        return Err(Error::Domain(format!(
            "trace has {} workers, checkpoint models {}",
            trace.n_workers(),
            predictor.n_workers()
        )));
    }
    let end = end.min(trace.len());
    if start < lag || start >= end {
        return Err(Error::InsufficientData(format!(
            "forecast range {start}..{end} needs {lag} prior rows within a trace of {}",
            trace.len()
        )));
    }
    let rows = trace.rows();
    let mut steps = Vec::with_capacity(end - start);
    for t in start..end {
        let mut buffer = predictor.new_buffer();
        for r in &rows[t - lag..t] {
            buffer.push(r.clone(), vec![EntryFlag::Observed; r.len()])?;
        }
        let pred = predictor.predict_next(&buffer, k, seed::derive(&[seed, 400, t as u64]))?;
        steps.push(StepForecast {
            iteration: t,
            observed_sorted: sorted_copy(&rows[t]),
            predicted: pred.predicted_order_stats()?,
            carry_forward_sorted: sorted_copy(&rows[t - 1]),
        });
    }
    let rmse_model = rmse(
        steps
            .iter()
            .map(|s| (s.predicted.means.as_slice(), s.observed_sorted.as_slice())),
    );
    let rmse_carry_forward = rmse(
        steps
            .iter()
            .map(|s| (s.carry_forward_sorted.as_slice(), s.observed_sorted.as_slice())),
    );
    Ok(ForecastReport {
        steps,
        rmse_model,
        rmse_carry_forward,
    })
}
