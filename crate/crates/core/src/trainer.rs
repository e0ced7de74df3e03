//! Joint stochastic ELBO training of the runtime model and its guide, plus
//! the checkpoint container.
//!
//! Checkpoint layout: `CUTOFFCK` magic, `u32` version, `u64` header length, a
//! JSON header (configs, normalization, metadata), then the generative and
//! guide parameter stores in their binary encoding.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dmm::{Dmm, DmmConfig};
use crate::error::{Error, Result};
use crate::guide::{Guide, GuideConfig};
use crate::ndmath::{adam_step, AdamConfig, BoundParams, ParameterStore, Tape, Var};
use crate::seed;
use crate::trace::{fit_normalization, normalize, LagWindow, NormalizationSpec, RuntimeTrace, DEFAULT_LAG};

const CKPT_MAGIC: &[u8; 8] = b"CUTOFFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub lag: usize,
    /// Reparameterized samples per window in the ELBO estimate.
    pub elbo_samples: usize,
    pub d_z: usize,
    pub transition_hidden: usize,
    pub emission_hidden: usize,
    pub guide_hidden: usize,
    /// Worker threads for per-window gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
            lag: DEFAULT_LAG,
            elbo_samples: 1,
            d_z: 32,
            transition_hidden: 64,
            emission_hidden: 64,
            guide_hidden: 64,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("lag", self.lag),
            ("elbo_samples", self.elbo_samples),
            ("d_z", self.d_z),
            ("transition_hidden", self.transition_hidden),
            ("emission_hidden", self.emission_hidden),
            ("guide_hidden", self.guide_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.clip_norm > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        Ok(())
    }

    pub fn dmm_config(&self, n_workers: usize) -> DmmConfig {
        DmmConfig {
            d_z: self.d_z,
            n_workers,
            transition_hidden: self.transition_hidden,
            emission_hidden: self.emission_hidden,
        }
    }

    pub fn guide_config(&self, n_workers: usize) -> GuideConfig {
        GuideConfig {
            d_z: self.d_z,
            n_workers,
            hidden: self.guide_hidden,
        }
    }

    fn thread_count(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

/// Generative model and guide sharing one latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeModel {
    pub dmm: Dmm,
    pub guide: Guide,
}

impl RuntimeModel {
    pub fn new(dmm: DmmConfig, guide: GuideConfig) -> Result<Self> {
        if dmm.d_z != guide.d_z || dmm.n_workers != guide.n_workers {
            return Err(Error::Config(format!(
                "model ({} latent, {} workers) and guide ({} latent, {} workers) disagree",
                dmm.d_z, dmm.n_workers, guide.d_z, guide.n_workers
            )));
        }
        Ok(Self {
            dmm: Dmm::new(dmm)?,
            guide: Guide::new(guide)?,
        })
    }

    pub fn n_workers(&self) -> usize {
        self.dmm.config().n_workers
    }

    fn elbo_tape(
        &self,
        theta: &ParameterStore,
        phi: &ParameterStore,
        window: &LagWindow,
        seed: u64,
        samples: usize,
    ) -> Result<(Tape, BoundParams, BoundParams, Var)> {
        if samples == 0 {
            return Err(Error::Config("elbo needs at least one sample".into()));
        }
        if window.n_workers() != self.n_workers() {
            return Err(Error::Model(format!(
                "window has {} workers, model expects {}",
                window.n_workers(),
                self.n_workers()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let tb = tape.bind(theta);
        let pb = tape.bind(phi);
        let xs: Vec<Var> = window.rows().iter().map(|r| tape.constant(r.clone())).collect();
        let w = 1.0 / samples as f64;
        let mut terms = Vec::with_capacity(2 * samples);
        for _ in 0..samples {
            let noise = self.guide.standard_noise(&mut rng, window.lag());
            let pass = self.guide.sample_on_tape(&mut tape, &self.dmm, &tb, &pb, &xs, &noise)?;
            let lj = self.dmm.log_joint_on_tape(&mut tape, &tb, &pass.z, &xs)?;
            terms.push((lj, w));
            terms.push((pass.log_q, -w));
        }
        let out = tape.weighted_sum(&terms)?;
        if !tape.scalar(out).is_finite() {
            return Err(Error::Training(format!("non-finite ELBO {}", tape.scalar(out))));
        }
        Ok((tape, tb, pb, out))
    }

    /// Reparameterized ELBO estimate for a normalized window.
    pub fn elbo(
        &self,
        theta: &ParameterStore,
        phi: &ParameterStore,
        window: &LagWindow,
        seed: u64,
        samples: usize,
    ) -> Result<f64> {
        let (tape, _, _, out) = self.elbo_tape(theta, phi, window, seed, samples)?;
        Ok(tape.scalar(out))
    }

    /// ELBO estimate and its gradient with respect to both stores.
    pub fn elbo_grad(
        &self,
        theta: &ParameterStore,
        phi: &ParameterStore,
        window: &LagWindow,
        seed: u64,
        samples: usize,
    ) -> Result<ElboGradient> {
        let (tape, tb, pb, out) = self.elbo_tape(theta, phi, window, seed, samples)?;
        let grads = tape.backward(out);
        let collect = |bound: &BoundParams, store: &ParameterStore| -> Vec<(String, Vec<f64>)> {
            bound
                .iter()
                .map(|(name, var)| {
                    let len = store.get(name).map_or(0, |p| p.value().len());
                    let g = grads.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec);
                    (name.to_string(), g)
                })
                .collect()
        };
        Ok(ElboGradient {
            value: tape.scalar(out),
            theta: collect(&tb, theta),
            phi: collect(&pb, phi),
        })
    }
}

/// Per-window ELBO value and gradients, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct ElboGradient {
    pub value: f64,
    pub theta: Vec<(String, Vec<f64>)>,
    pub phi: Vec<(String, Vec<f64>)>,
}

fn add_grads(store: &mut ParameterStore, grads: &[(String, Vec<f64>)], weight: f64) -> Result<()> {
    for (name, g) in grads {
        let p = store
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("gradient for unknown parameter {name:?}")))?;
        for (slot, v) in p.grad_mut().iter_mut().zip(g) {
            *slot += weight * v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub steps: u64,
    pub seed: u64,
    pub trained: bool,
    pub final_elbo: Option<f64>,
    /// Mean per-window ELBO of each optimizer step's minibatch.
    pub elbo_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub dmm: DmmConfig,
    pub guide: GuideConfig,
    pub lag: usize,
    pub theta: ParameterStore,
    pub phi: ParameterStore,
    pub normalization: NormalizationSpec,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dmm: DmmConfig,
    guide: GuideConfig,
    lag: usize,
    normalization: NormalizationSpec,
    meta: TrainingMeta,
}

impl ModelCheckpoint {
    /// Freshly initialized parameters with no training.
    pub fn untrained(cfg: &TrainConfig, n_workers: usize, normalization: NormalizationSpec) -> Result<Self> {
        cfg.validate()?;
        let model = RuntimeModel::new(cfg.dmm_config(n_workers), cfg.guide_config(n_workers))?;
        Ok(Self {
            dmm: *model.dmm.config(),
            guide: *model.guide.config(),
            lag: cfg.lag,
            theta: model.dmm.init_params(seed::derive(&[cfg.seed, 0]))?,
            phi: model.guide.init_params(seed::derive(&[cfg.seed, 1]))?,
            normalization,
            meta: TrainingMeta {
                epochs: 0,
                steps: 0,
                seed: cfg.seed,
                trained: false,
                final_elbo: None,
                elbo_history: Vec::new(),
            },
        })
    }

    pub fn model(&self) -> Result<RuntimeModel> {
        RuntimeModel::new(self.dmm, self.guide)
    }

    pub fn n_workers(&self) -> usize {
        self.dmm.n_workers
    }

    /// Checks that both stores match the declared configurations.
    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        let wrap = |e: Error| Error::Checkpoint(format!("parameters disagree with declared config: {e}"));
        model.dmm.check_params(&self.theta).map_err(wrap)?;
        model.guide.check_params(&self.phi).map_err(wrap)?;
        if self.lag == 0 {
            return Err(Error::Checkpoint("lag must be positive".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            dmm: self.dmm,
            guide: self.guide,
            lag: self.lag,
            normalization: self.normalization,
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.theta.to_bytes());
        out.extend_from_slice(&self.phi.to_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = || Error::Checkpoint("truncated or corrupt file".into());
        if bytes.len() < 20 {
            return Err(corrupt());
        }
        if &bytes[..8] != CKPT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let hend = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(20))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(corrupt)?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|_| corrupt())?;
        let (theta, used) = ParameterStore::from_bytes(&bytes[hend..])?;
        let (phi, used2) = ParameterStore::from_bytes(&bytes[hend + used..])?;
        if hend + used + used2 != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameter stores".into()));
        }
        let ckpt = Self {
            dmm: header.dmm,
            guide: header.guide,
            lag: header.lag,
            theta,
            phi,
            normalization: header.normalization,
            meta: header.meta,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Bit-level equality of configs, normalization and parameter values.
    pub fn same_as(&self, other: &Self) -> bool {
        self.dmm == other.dmm
            && self.guide == other.guide
            && self.lag == other.lag
            && self.normalization.scale.to_bits() == other.normalization.scale.to_bits()
            && self.theta.same_values(&other.theta)
            && self.phi.same_values(&other.phi)
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}

/// All stride-1 windows of a (normalized) trace.
pub fn windows(trace: &RuntimeTrace, lag: usize) -> Result<Vec<LagWindow>> {
    if trace.len() < lag {
        return Err(Error::InsufficientData(format!(
            "trace has {} rows, a window needs {lag}",
            trace.len()
        )));
    }
    (0..=trace.len() - lag).map(|s| trace.window(s, lag)).collect()
}

/// Fits the normalization on the first window, then maximizes the mean ELBO
/// over shuffled stride-1 windows with Adam.
///
/// The optimizer sees the ELBO divided by `lag * n_workers`; reported ELBO
/// values are unscaled.
pub fn train(trace: &RuntimeTrace, cfg: &TrainConfig) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if trace.len() < cfg.lag + 1 {
        return Err(Error::InsufficientData(format!(
            "training needs at least {} rows, trace has {}",
            cfg.lag + 1,
            trace.len()
        )));
    }
    let normalization = fit_normalization(trace, cfg.lag)?;
    let data = normalize(trace, &normalization);
    let wins = windows(&data, cfg.lag)?;
    let mut ckpt = ModelCheckpoint::untrained(cfg, trace.n_workers(), normalization)?;
    let model = ckpt.model()?;
    let threads = cfg.thread_count();
    let per_scalar = 1.0 / (cfg.lag * trace.n_workers()) as f64;

    let mut order: Vec<usize> = (0..wins.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[cfg.seed, 2, epoch as u64]));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, u64)> = batch
                .iter()
                .map(|&w| (w, seed::derive(&[cfg.seed, 3, epoch as u64, w as u64])))
                .collect();
            let results = evaluate_batch(&model, &ckpt, &wins, &jobs, cfg.elbo_samples, threads);
            ckpt.theta.zero_grad();
            ckpt.phi.zero_grad();
            let weight = -per_scalar / batch.len() as f64;
            let mut total = 0.0;
            for ((w, _), r) in jobs.iter().zip(results) {
                let g = r.map_err(|e| match e {
                    Error::Training(m) => Error::Training(format!("epoch {epoch}, window {w}: {m}")),
                    other => other,
                })?;
                total += g.value;
                add_grads(&mut ckpt.theta, &g.theta, weight)?;
                add_grads(&mut ckpt.phi, &g.phi, weight)?;
            }
            let stepped = adam_step(&mut ckpt.theta, &cfg.adam).and_then(|_| adam_step(&mut ckpt.phi, &cfg.adam));
            stepped.map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            ckpt.meta.elbo_history.push(total / batch.len() as f64);
        }
    }
    ckpt.meta.epochs = cfg.epochs;
    ckpt.meta.steps = ckpt.theta.step();
    ckpt.meta.trained = cfg.epochs > 0;
    ckpt.meta.final_elbo = ckpt.meta.elbo_history.last().copied();
    Ok(ckpt)
}

/// Evaluates window gradients, fanning out over threads. Results come back in
/// job order so the reduction is independent of scheduling.
fn evaluate_batch(
    model: &RuntimeModel,
    ckpt: &ModelCheckpoint,
    wins: &[LagWindow],
    jobs: &[(usize, u64)],
    samples: usize,
    threads: usize,
) -> Vec<Result<ElboGradient>> {
    let eval = |&(w, s): &(usize, u64)| model.elbo_grad(&ckpt.theta, &ckpt.phi, &wins[w], s, samples);
    let threads = threads.min(jobs.len()).max(1);
    if threads == 1 {
        return jobs.iter().map(eval).collect();
    }
    let chunk = jobs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(eval).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    })
}
