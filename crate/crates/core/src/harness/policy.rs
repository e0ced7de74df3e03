//! Cutoff policies for the synchronous harness.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orderstats::{argmax_cutoff, elfving_expectation};
use crate::predictor::{
    choose_cutoff, impute_censored_with, EntryFlag, ImputeMode, ObservationBuffer, PredictiveDistribution, Predictor,
    DEFAULT_K,
};
use crate::seed;

/// What a policy learns after an iteration: runtimes of the contributing
/// workers, `None` for the dropped ones, and the time the server stopped
/// waiting.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub iteration: usize,
    pub runtimes: &'a [Option<f64>],
    pub cutoff_time: f64,
}

pub trait CutoffPolicy {
    fn name(&self) -> String;
    /// Number of workers to wait for in `iteration`.
    fn choose(&mut self, iteration: usize, n_workers: usize) -> Result<usize>;
    fn observe(&mut self, obs: &Observation<'_>) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    FullSync,
    StaticCutoff(usize),
    GaussianOrder,
    ModelCutoff,
    Oracle,
    AsyncStaleness,
}

impl PolicyKind {
    pub fn label(&self) -> &'static str {
        match self {
            PolicyKind::FullSync => "full_sync",
            PolicyKind::StaticCutoff(_) => "static_cutoff",
            PolicyKind::GaussianOrder => "gaussian_order",
            PolicyKind::ModelCutoff => "model_cutoff",
            PolicyKind::Oracle => "oracle",
            PolicyKind::AsyncStaleness => "async_staleness",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::StaticCutoff(c) => write!(f, "static_cutoff:{c}"),
            other => f.write_str(other.label()),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    /// `full_sync`, `static_cutoff:<c>`, `gaussian_order`, `model_cutoff`,
    /// `oracle`, `async_staleness`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full_sync" => PolicyKind::FullSync,
            "gaussian_order" => PolicyKind::GaussianOrder,
            "model_cutoff" => PolicyKind::ModelCutoff,
            "oracle" => PolicyKind::Oracle,
            "async_staleness" => PolicyKind::AsyncStaleness,
            _ => {
                let c = s
                    .strip_prefix("static_cutoff:")
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))?;
                PolicyKind::StaticCutoff(c)
            }
        })
    }
}

fn check_c(c: usize, n: usize) -> Result<usize> {
    if c == 0 || c > n {
        return Err(Error::Domain(format!("cutoff {c} outside 1..={n}")));
    }
    Ok(c)
}

#[derive(Debug, Clone, Default)]
pub struct FullSync;

impl CutoffPolicy for FullSync {
    fn name(&self) -> String {
        "full_sync".into()
    }

    fn choose(&mut self, _: usize, n: usize) -> Result<usize> {
        Ok(n)
    }

    fn observe(&mut self, _: &Observation<'_>) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StaticCutoff {
    pub c: usize,
}

impl CutoffPolicy for StaticCutoff {
    fn name(&self) -> String {
        "static_cutoff".into()
    }

    fn choose(&mut self, _: usize, n: usize) -> Result<usize> {
        check_c(self.c, n)
    }

    fn observe(&mut self, _: &Observation<'_>) -> Result<()> {
        Ok(())
    }
}

/// Fits one normal to the runtimes observed over the last `window`
/// iterations and maximizes `c / E[x_(c)]` under it, with expectations from
/// the Elfving approximation.
#[derive(Debug, Clone)]
pub struct GaussianOrder {
    window: usize,
    c_min: usize,
    history: VecDeque<Vec<f64>>,
}

impl GaussianOrder {
    pub fn new(window: usize, c_min: usize) -> Result<Self> {
        if window == 0 || c_min == 0 {
            return Err(Error::Config("window and c_min must be positive".into()));
        }
        Ok(Self {
            window,
            c_min,
            history: VecDeque::new(),
        })
    }
}

impl CutoffPolicy for GaussianOrder {
    fn name(&self) -> String {
        "gaussian_order".into()
    }

    fn choose(&mut self, _: usize, n: usize) -> Result<usize> {
        let pooled: Vec<f64> = self.history.iter().flatten().copied().collect();
        if pooled.len() < 2 || n < 2 {
            return Ok(n);
        }
        let k = pooled.len() as f64;
        let mu = pooled.iter().sum::<f64>() / k;
        let sigma = (pooled.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        let c_min = self.c_min.min(n);
        let scores = (1..=n)
            .map(|c| {
                let e = elfving_expectation(n, c, mu, sigma)?;
                Ok(if e > 0.0 { c as f64 / e } else { f64::NEG_INFINITY })
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(argmax_cutoff(&scores, c_min))
    }

    fn observe(&mut self, obs: &Observation<'_>) -> Result<()> {
        self.history.push_back(obs.runtimes.iter().flatten().copied().collect());
        if self.history.len() > self.window {
            self.history.pop_front();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPolicyConfig {
    /// Predictive samples per decision.
    pub k: usize,
    pub c_min: usize,
    pub seed: u64,
    pub impute: ImputeMode,
}

impl Default for ModelPolicyConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            c_min: 1,
            seed: 0,
            impute: ImputeMode::Marginal,
        }
    }
}

/// Predictor-driven cutoff with censored-runtime imputation. Waits for all
/// workers until the buffer holds `lag` iterations.
#[derive(Debug, Clone)]
pub struct ModelCutoff {
    predictor: Arc<Predictor>,
    cfg: ModelPolicyConfig,
    buffer: ObservationBuffer,
    pending: Option<PredictiveDistribution>,
    imputed_entries: usize,
    fallback_entries: usize,
}

impl ModelCutoff {
    pub fn new(predictor: Arc<Predictor>, cfg: ModelPolicyConfig) -> Result<Self> {
        if cfg.k == 0 || cfg.c_min == 0 {
            return Err(Error::Config("K and c_min must be positive".into()));
        }
        let buffer = predictor.new_buffer();
        Ok(Self {
            predictor,
            cfg,
            buffer,
            pending: None,
            imputed_entries: 0,
            fallback_entries: 0,
        })
    }

    /// Seeds the buffer with fully observed rows from before the run.
    pub fn with_history(mut self, rows: &[Vec<f64>]) -> Result<Self> {
        for r in rows {
            self.buffer.push(r.clone(), vec![EntryFlag::Observed; r.len()])?;
        }
        Ok(self)
    }

    pub fn buffer(&self) -> &ObservationBuffer {
        &self.buffer
    }

    /// Counts of imputed and fallback-imputed entries so far.
    pub fn imputation_counts(&self) -> (usize, usize) {
        (self.imputed_entries, self.fallback_entries)
    }
}

impl CutoffPolicy for ModelCutoff {
    fn name(&self) -> String {
        "model_cutoff".into()
    }

    fn choose(&mut self, iteration: usize, n: usize) -> Result<usize> {
        self.pending = None;
        if !self.buffer.is_full() {
            return Ok(n);
        }
        let s = seed::derive(&[self.cfg.seed, 300, iteration as u64]);
        let pred = self.predictor.predict_next(&self.buffer, self.cfg.k, s)?;
        let c = choose_cutoff(&pred.samples, self.cfg.c_min.min(n))?.c;
        self.pending = Some(pred);
        Ok(c)
    }

    fn observe(&mut self, obs: &Observation<'_>) -> Result<()> {
        let censored = obs.runtimes.iter().any(Option::is_none);
        let (values, flags) = match (&self.pending, censored) {
            (Some(pred), true) => {
                let s = seed::derive(&[self.cfg.seed, 301, obs.iteration as u64]);
                let imp = impute_censored_with(pred, obs.runtimes, obs.cutoff_time, s, self.cfg.impute)?;
                for f in &imp.flags {
                    match f {
                        EntryFlag::Imputed => self.imputed_entries += 1,
                        EntryFlag::ImputedFallback => self.fallback_entries += 1,
                        EntryFlag::Observed => {}
                    }
                }
                (imp.values, imp.flags)
            }
            (None, true) => {
                return Err(Error::Domain(
                    "censored workers without a prediction to impute from".into(),
                ))
            }
            (_, false) => (
                obs.runtimes.iter().map(|v| v.expect("all observed")).collect(),
                vec![EntryFlag::Observed; obs.runtimes.len()],
            ),
        };
        self.pending = None;
        self.buffer.push(values, flags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names_round_trip() {
        for p in [
            PolicyKind::FullSync,
            PolicyKind::StaticCutoff(140),
            PolicyKind::GaussianOrder,
            PolicyKind::ModelCutoff,
            PolicyKind::Oracle,
            PolicyKind::AsyncStaleness,
        ] {
            assert_eq!(p.to_string().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("static_cutoff:x".parse::<PolicyKind>().is_err());
        assert!("hogwild".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn gaussian_order_cold_starts_at_n_and_prefers_cutoffs_with_spread() {
        let mut g = GaussianOrder::new(5, 1).unwrap();
        assert_eq!(g.choose(0, 158).unwrap(), 158);
        let row: Vec<Option<f64>> = (0..158)
            .map(|j| Some(1.057 + 0.393 * ((j as f64 / 157.0) * 3.4 - 1.7)))
            .collect();
        g.observe(&Observation {
            iteration: 0,
            runtimes: &row,
            cutoff_time: 2.0,
        })
        .unwrap();
        let c = g.choose(1, 158).unwrap();
        assert!(c < 158 && c > 79, "{c}");
        // No spread: waiting for everyone is optimal.
        let mut g = GaussianOrder::new(5, 1).unwrap();
        let flat = vec![Some(1.0); 10];
        g.observe(&Observation {
            iteration: 0,
            runtimes: &flat,
            cutoff_time: 1.0,
        })
        .unwrap();
        assert_eq!(g.choose(1, 10).unwrap(), 10);
    }

    #[test]
    fn static_cutoff_is_range_checked() {
        assert!(StaticCutoff { c: 0 }.choose(0, 4).is_err());
        assert!(StaticCutoff { c: 5 }.choose(0, 4).is_err());
        assert_eq!(StaticCutoff { c: 3 }.choose(0, 4).unwrap(), 3);
    }
}
