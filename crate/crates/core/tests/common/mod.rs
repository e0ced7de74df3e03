#![allow(dead_code)]

pub mod grad;

use cutoff_core::dmm::{Dmm, DmmConfig, STD_FLOOR};
use cutoff_core::guide::{Guide, GuideConfig};
use cutoff_core::ndmath::{softplus_inverse, BoundParams, ParameterStore, Tape, Var};
use cutoff_core::trace::RuntimeTrace;
use cutoff_core::trainer::{ModelCheckpoint, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

/// Value of a scalar tape objective and its gradient for every bound parameter.
pub fn tape_gradient<F>(store: &ParameterStore, build: F) -> (f64, Vec<(String, Vec<f64>)>)
where
    F: Fn(&mut Tape, &BoundParams) -> Var,
{
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let out = build(&mut tape, &bound);
    let grads = tape.backward(out);
    let g = bound
        .iter()
        .map(|(name, var)| {
            let len = store.get(name).unwrap().value().len();
            let v = grads.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec);
            (name.to_string(), v)
        })
        .collect();
    (tape.scalar(out), g)
}

pub fn tape_value<F>(store: &ParameterStore, build: F) -> f64
where
    F: Fn(&mut Tape, &BoundParams) -> Var,
{
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let out = build(&mut tape, &bound);
    tape.scalar(out)
}

/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Central difference of `f` in one scalar of `store`.
pub fn central_difference(store: &ParameterStore, name: &str, index: usize, f: &dyn Fn(&ParameterStore) -> f64) -> f64 {
    let mut plus = store.clone();
    plus.get_mut(name).unwrap().value_mut()[index] += FD_STEP;
    let mut minus = store.clone();
    minus.get_mut(name).unwrap().value_mut()[index] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

/// Worst relative error over every scalar listed in `analytic`.
pub fn max_fd_error(
    store: &ParameterStore,
    analytic: &[(String, Vec<f64>)],
    f: &dyn Fn(&ParameterStore) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, g) in analytic {
        for (i, &a) in g.iter().enumerate() {
            worst = worst.max(relative_error(a, central_difference(store, name, i, f)));
        }
    }
    worst
}

/// `sum(c * v)` for a fixed random `c` of matching width.
pub fn random_projection(tape: &mut Tape, v: Var, rng: &mut ChaCha8Rng) -> Var {
    let width = tape.value(v).len();
    let c: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = tape.constant(c);
    let prod = tape.mul(v, c).unwrap();
    tape.sum(prod)
}

pub fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Scalar state-space model
/// `z_1 ~ N(m0, s0^2)`, `z_t = a z_{t-1} + N(0, q^2)`, `x_t = b z_t + N(0, r^2)`.
#[derive(Debug, Clone, Copy)]
pub struct LinearGaussian {
    pub m0: f64,
    pub s0: f64,
    pub a: f64,
    pub q: f64,
    pub b: f64,
    pub r: f64,
}

impl LinearGaussian {
    /// Exact `log p(x_1..x_T)` by Kalman filtering.
    pub fn log_marginal(&self, xs: &[f64]) -> f64 {
        let (mut mu, mut p) = (self.m0, self.s0 * self.s0);
        let mut ll = 0.0;
        for (t, &x) in xs.iter().enumerate() {
            if t > 0 {
                mu *= self.a;
                p = self.a * self.a * p + self.q * self.q;
            }
            let s = self.b * self.b * p + self.r * self.r;
            let resid = x - self.b * mu;
            ll += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + resid * resid / s);
            let k = p * self.b / s;
            mu += k * resid;
            p *= 1.0 - k * self.b;
        }
        ll
    }

    /// Exact posterior `(mean, std)` of `z_1` given a single observation.
    pub fn single_step_posterior(&self, x: f64) -> (f64, f64) {
        let prec = 1.0 / (self.s0 * self.s0) + self.b * self.b / (self.r * self.r);
        let var = 1.0 / prec;
        (
            var * (self.m0 / (self.s0 * self.s0) + self.b * x / (self.r * self.r)),
            var.sqrt(),
        )
    }

    pub fn simulate(&self, steps: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = self.m0 + self.s0 * rng.sample::<f64, _>(StandardNormal);
        let mut xs = Vec::with_capacity(steps);
        for t in 0..steps {
            if t > 0 {
                z = self.a * z + self.q * rng.sample::<f64, _>(StandardNormal);
            }
            xs.push(self.b * z + self.r * rng.sample::<f64, _>(StandardNormal));
        }
        xs
    }

    /// One-worker, one-latent DMM configuration.
    pub fn dmm(&self) -> Dmm {
        Dmm::new(DmmConfig {
            d_z: 1,
            n_workers: 1,
            transition_hidden: 3,
            emission_hidden: 3,
        })
        .unwrap()
    }

    /// DMM parameters that realize this model exactly: the gate is shut, the
    /// stds are constants and the emission mean is `b z`.
    pub fn dmm_params(&self, dmm: &Dmm, seed: u64) -> ParameterStore {
        let raw = |s: f64| softplus_inverse(s - STD_FLOOR);
        let mut p = dmm.init_params(seed).unwrap();
        let h = dmm.config().emission_hidden;
        let th = dmm.config().transition_hidden;
        let first = |v: f64, len: usize| {
            let mut w = vec![0.0; len];
            w[0] = v;
            w
        };
        p.set_value("init.mean", &[self.m0]).unwrap();
        p.set_value("init.std_raw", &[raw(self.s0)]).unwrap();
        p.set_value("trans.linear.0.weight", &[self.a]).unwrap();
        p.set_value("trans.linear.0.bias", &[0.0]).unwrap();
        p.set_value("trans.gate.1.weight", &vec![0.0; th]).unwrap();
        p.set_value("trans.gate.1.bias", &[-60.0]).unwrap();
        p.set_value("trans.std.0.weight", &[0.0]).unwrap();
        p.set_value("trans.std.0.bias", &[raw(self.q)]).unwrap();
        p.set_value("emit.mean.0.weight", &first(1.0, h)).unwrap();
        p.set_value("emit.mean.0.bias", &vec![0.0; h]).unwrap();
        p.set_value("emit.mean.1.weight", &first(self.b, h)).unwrap();
        p.set_value("emit.mean.1.bias", &[0.0]).unwrap();
        p.set_value("emit.std.1.weight", &vec![0.0; h]).unwrap();
        p.set_value("emit.std.1.bias", &[raw(self.r)]).unwrap();
        p
    }

    pub fn guide(&self, hidden: usize) -> Guide {
        Guide::new(GuideConfig {
            d_z: 1,
            n_workers: 1,
            hidden,
        })
        .unwrap()
    }

    /// Guide parameters whose single-step output is the given Gaussian.
    pub fn fixed_guide_params(guide: &Guide, seed: u64, mean: f64, std: f64) -> ParameterStore {
        let h = guide.config().hidden;
        let mut p = guide.init_params(seed).unwrap();
        p.set_value("guide.loc.0.weight", &vec![0.0; h]).unwrap();
        p.set_value("guide.loc.0.bias", &[mean]).unwrap();
        p.set_value("guide.scale.0.weight", &[0.0]).unwrap();
        p.set_value("guide.scale.0.bias", &[softplus_inverse(std - STD_FLOOR)])
            .unwrap();
        p
    }
}

/// Positive one-worker trace `level + x_t` from a linear-Gaussian process.
pub fn linear_gaussian_trace(model: &LinearGaussian, level: f64, steps: usize, seed: u64) -> RuntimeTrace {
    let rows = model
        .simulate(steps, seed)
        .into_iter()
        .map(|x| vec![level + x])
        .collect();
    RuntimeTrace::new(1, rows).unwrap().quantized()
}

/// Small model sizes that train in seconds.
pub fn small_config(lag: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        lag,
        seed,
        d_z: 2,
        transition_hidden: 16,
        emission_hidden: 16,
        guide_hidden: 16,
        threads: 1,
        ..TrainConfig::default()
    }
}

pub fn untrained_like(trained: &ModelCheckpoint, cfg: &TrainConfig) -> ModelCheckpoint {
    ModelCheckpoint::untrained(cfg, trained.n_workers(), trained.normalization).unwrap()
}
