//! Deep Markov model over normalized runtime vectors.
//!
//! ```text
//! z_1 ~ N(mu_0, sigma_0)                        (learned initial state)
//! z_t ~ N(G(z_{t-1}), H(z_{t-1}))               (gated transition)
//! x_t ~ N(I(z_t), J(z_t))                       (emission)
//!
//! G(z) = (1 - g) * Lin(z) + g * h,  g = MLP(z; ReLU, Sigmoid), h = MLP(z; ReLU, Identity)
//! H(z) = Softplus(Lin'(ReLU(G(z))))
//! I(z) = Lin2(Lin1(z)),             J(z) = MLP(I(z); ReLU, Softplus)
//! ```
//!
//! Every standard deviation gets a `1e-6` floor after the softplus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{softplus_inverse, Activation, BoundParams, Mlp, MlpSpec, ParameterStore, Tape, Var};
use crate::normal;

pub const STD_FLOOR: f64 = 1e-6;

const INIT_MEAN: &str = "init.mean";
const INIT_STD: &str = "init.std_raw";

/// Diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianVector {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianVector {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::shape("gaussian std", mean.len(), std.len()));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Domain(format!("gaussian std must be positive, got {s}")));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        normal::diag_log_pdf(x, &self.mean, &self.std)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let e: f64 = rng.sample(StandardNormal);
                m + s * e
            })
            .collect()
    }

    pub(crate) fn from_tape(tape: &Tape, (mean, std): (Var, Var)) -> Self {
        Self {
            mean: tape.value(mean).to_vec(),
            std: tape.value(std).to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmmConfig {
    pub d_z: usize,
    pub n_workers: usize,
    pub transition_hidden: usize,
    pub emission_hidden: usize,
}

impl DmmConfig {
    pub fn new(n_workers: usize) -> Self {
        Self {
            d_z: 32,
            n_workers,
            transition_hidden: 64,
            emission_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 || self.n_workers == 0 || self.transition_hidden == 0 || self.emission_hidden == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// One step of an ancestral rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub z: Vec<f64>,
    pub emission: GaussianVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dmm {
    cfg: DmmConfig,
    linear: Mlp,
    gate: Mlp,
    proposal: Mlp,
    trans_std: Mlp,
    emit_mean: Mlp,
    emit_std: Mlp,
}

impl Dmm {
    pub fn new(cfg: DmmConfig) -> Result<Self> {
        use Activation::*;
        cfg.validate()?;
        let (d, th, eh, n) = (cfg.d_z, cfg.transition_hidden, cfg.emission_hidden, cfg.n_workers);
        Ok(Self {
            cfg,
            linear: Mlp::new("trans.linear", MlpSpec::new(vec![d, d], vec![Identity])?),
            gate: Mlp::new("trans.gate", MlpSpec::new(vec![d, th, d], vec![Relu, Sigmoid])?),
            proposal: Mlp::new("trans.proposal", MlpSpec::new(vec![d, th, d], vec![Relu, Identity])?),
            trans_std: Mlp::new("trans.std", MlpSpec::new(vec![d, d], vec![Softplus])?),
            emit_mean: Mlp::new("emit.mean", MlpSpec::new(vec![d, eh, n], vec![Identity, Identity])?),
            emit_std: Mlp::new("emit.std", MlpSpec::new(vec![n, eh, n], vec![Relu, Softplus])?),
        })
    }

    pub fn config(&self) -> &DmmConfig {
        &self.cfg
    }

    /// Fresh generative parameters: glorot weights, zero biases, unit initial std.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for mlp in self.mlps() {
            mlp.init(&mut store, &mut rng)?;
        }
        let d = self.cfg.d_z;
        // The linear path starts as the identity so latent state persists.
        let eye: Vec<f64> = (0..d * d).map(|i| f64::from(u8::from(i % (d + 1) == 0))).collect();
        store.set_value(&self.linear.weight_name(0), &eye)?;
        store.insert(INIT_MEAN, &[d], vec![0.0; d])?;
        store.insert(INIT_STD, &[d], vec![softplus_inverse(1.0); d])?;
        Ok(store)
    }

    fn mlps(&self) -> [&Mlp; 6] {
        [
            &self.linear,
            &self.gate,
            &self.proposal,
            &self.trans_std,
            &self.emit_mean,
            &self.emit_std,
        ]
    }

    /// Checks that `store` holds exactly this model's parameters and shapes.
    pub fn check_params(&self, store: &ParameterStore) -> Result<()> {
        let reference = self.init_params(0)?;
        for (name, p) in reference.iter() {
            match store.get(name) {
                Some(q) if q.shape() == p.shape() => {}
                Some(q) => {
                    return Err(Error::Model(format!(
                        "parameter {name:?} has shape {:?}, config expects {:?}",
                        q.shape(),
                        p.shape()
                    )))
                }
                None => return Err(Error::Model(format!("missing parameter {name:?}"))),
            }
        }
        if store.len() != reference.len() {
            return Err(Error::Model("parameter store has unexpected entries".into()));
        }
        Ok(())
    }

    fn floored_std(tape: &mut Tape, v: Var) -> Var {
        tape.scale_shift(v, 1.0, STD_FLOOR)
    }

    /// Distribution of the first latent state in a window.
    pub fn initial_on_tape(&self, tape: &mut Tape, theta: &BoundParams) -> Result<(Var, Var)> {
        let mean = theta.get(INIT_MEAN)?;
        let raw = theta.get(INIT_STD)?;
        let sp = tape.activation(Activation::Softplus, raw);
        Ok((mean, Self::floored_std(tape, sp)))
    }

    pub fn transition_on_tape(&self, tape: &mut Tape, theta: &BoundParams, z_prev: Var) -> Result<(Var, Var)> {
        let linear = self.linear.forward(tape, theta, z_prev)?;
        let gate = self.gate.forward(tape, theta, z_prev)?;
        let proposal = self.proposal.forward(tape, theta, z_prev)?;
        let closed = tape.scale_shift(gate, -1.0, 1.0);
        let a = tape.mul(closed, linear)?;
        let b = tape.mul(gate, proposal)?;
        let mean = tape.add(a, b)?;
        let rectified = tape.activation(Activation::Relu, mean);
        let sp = self.trans_std.forward(tape, theta, rectified)?;
        Ok((mean, Self::floored_std(tape, sp)))
    }

    pub fn emission_on_tape(&self, tape: &mut Tape, theta: &BoundParams, z: Var) -> Result<(Var, Var)> {
        let mean = self.emit_mean.forward(tape, theta, z)?;
        let sp = self.emit_std.forward(tape, theta, mean)?;
        Ok((mean, Self::floored_std(tape, sp)))
    }

    /// `log p(z_1..z_T, x_1..x_T)` as a scalar node.
    pub fn log_joint_on_tape(&self, tape: &mut Tape, theta: &BoundParams, zs: &[Var], xs: &[Var]) -> Result<Var> {
        if zs.len() != xs.len() {
            return Err(Error::Model(format!(
                "{} latent states for {} observations",
                zs.len(),
                xs.len()
            )));
        }
        if zs.is_empty() {
            return Err(Error::Model("empty sequence".into()));
        }
        let mut terms = Vec::with_capacity(2 * zs.len());
        let mut prior = self.initial_on_tape(tape, theta)?;
        for (i, (&z, &x)) in zs.iter().zip(xs).enumerate() {
            if i > 0 {
                prior = self.transition_on_tape(tape, theta, zs[i - 1])?;
            }
            terms.push((tape.gaussian_log_pdf(z, prior.0, prior.1)?, 1.0));
            let (em, es) = self.emission_on_tape(tape, theta, z)?;
            terms.push((tape.gaussian_log_pdf(x, em, es)?, 1.0));
        }
        tape.weighted_sum(&terms)
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.cfg.d_z {
            return Err(Error::Model(format!(
                "latent state has dimension {}, model expects {}",
                z.len(),
                self.cfg.d_z
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("latent state is not finite".into()));
        }
        Ok(())
    }

    pub fn initial(&self, theta: &ParameterStore) -> Result<GaussianVector> {
        let mut tape = Tape::new();
        let p = tape.bind(theta);
        let out = self.initial_on_tape(&mut tape, &p)?;
        Ok(GaussianVector::from_tape(&tape, out))
    }

    pub fn transition(&self, theta: &ParameterStore, z_prev: &[f64]) -> Result<GaussianVector> {
        self.check_latent(z_prev)?;
        let mut tape = Tape::new();
        let p = tape.bind(theta);
        let z = tape.constant(z_prev.to_vec());
        let out = self.transition_on_tape(&mut tape, &p, z)?;
        Ok(GaussianVector::from_tape(&tape, out))
    }

    pub fn emission(&self, theta: &ParameterStore, z: &[f64]) -> Result<GaussianVector> {
        self.check_latent(z)?;
        let mut tape = Tape::new();
        let p = tape.bind(theta);
        let zv = tape.constant(z.to_vec());
        let out = self.emission_on_tape(&mut tape, &p, zv)?;
        Ok(GaussianVector::from_tape(&tape, out))
    }

    pub fn log_joint(&self, theta: &ParameterStore, zs: &[Vec<f64>], xs: &[Vec<f64>]) -> Result<f64> {
        for z in zs {
            self.check_latent(z)?;
        }
        if let Some(x) = xs.iter().find(|x| x.len() != self.cfg.n_workers) {
            return Err(Error::Model(format!(
                "observation has {} workers, model expects {}",
                x.len(),
                self.cfg.n_workers
            )));
        }
        let mut tape = Tape::new();
        let p = tape.bind(theta);
        let zv: Vec<Var> = zs.iter().map(|z| tape.constant(z.clone())).collect();
        let xv: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = self.log_joint_on_tape(&mut tape, &p, &zv, &xv)?;
        Ok(tape.scalar(out))
    }

    /// Ancestral sampling `z_{t+1} ~ transition(z_t)` for `steps` steps from
    /// `z_start`, recording each new state's emission distribution.
    pub fn rollout(
        &self,
        theta: &ParameterStore,
        z_start: &[f64],
        steps: usize,
        seed: u64,
    ) -> Result<Vec<RolloutStep>> {
        if steps == 0 {
            return Err(Error::Domain("rollout needs at least one step".into()));
        }
        self.check_latent(z_start)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = z_start.to_vec();
        let mut out = Vec::with_capacity(steps);
        for step in 0..steps {
            z = self.transition(theta, &z)?.sample(&mut rng);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Model(format!(
                    "rollout produced a non-finite state at step {step}"
                )));
            }
            let emission = self.emission(theta, &z)?;
            out.push(RolloutStep { z: z.clone(), emission });
        }
        Ok(out)
    }
}
