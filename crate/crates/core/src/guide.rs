//! Amortized left-right variational guide.
//!
//! For a window `x_0..x_{l-1}` a forward and a backward ReLU RNN summarize the
//! observations strictly left and strictly right of each step. The step-`t`
//! posterior is
//!
//! ```text
//! h   = (tanh(W z_{t-1} + b) + h_left(t) + h_right(t)) / 3
//! q(z_t | z_{t-1}, x) = N(Lin(h), Softplus(Lin'(Lin(h))))
//! ```
//!
//! An empty side contributes a zero vector, and the first step conditions on
//! the model's initial-state mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dmm::{Dmm, GaussianVector, STD_FLOOR};
use crate::error::{Error, Result};
use crate::ndmath::{Activation, BoundParams, Direction, Mlp, MlpSpec, ParameterStore, Rnn, Tape, Var};
use crate::trace::LagWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuideConfig {
    pub d_z: usize,
    pub n_workers: usize,
    pub hidden: usize,
}

impl GuideConfig {
    pub fn new(d_z: usize, n_workers: usize) -> Self {
        Self {
            d_z,
            n_workers,
            hidden: 64,
        }
    }
}

/// Latent path drawn from the guide with its log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub z: Vec<Vec<f64>>,
    pub log_q: f64,
}

impl PosteriorSample {
    pub fn last(&self) -> &[f64] {
        self.z.last().expect("posterior samples are never empty")
    }
}

/// On-tape result of one guide pass.
pub struct GuidePass {
    pub z: Vec<Var>,
    pub log_q: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Guide {
    cfg: GuideConfig,
    left: Rnn,
    right: Rnn,
    z_proj: Mlp,
    loc: Mlp,
    scale: Mlp,
}

impl Guide {
    pub fn new(cfg: GuideConfig) -> Result<Self> {
        use Activation::*;
        if cfg.d_z == 0 || cfg.n_workers == 0 || cfg.hidden == 0 {
            return Err(Error::Config(format!("guide dimensions must be positive: {cfg:?}")));
        }
        let (d, h, n) = (cfg.d_z, cfg.hidden, cfg.n_workers);
        Ok(Self {
            cfg,
            left: Rnn::new("guide.rnn_left", n, h),
            right: Rnn::new("guide.rnn_right", n, h),
            z_proj: Mlp::new("guide.z_proj", MlpSpec::new(vec![d, h], vec![Tanh])?),
            loc: Mlp::new("guide.loc", MlpSpec::new(vec![h, d], vec![Identity])?),
            scale: Mlp::new("guide.scale", MlpSpec::new(vec![d, d], vec![Softplus])?),
        })
    }

    pub fn config(&self) -> &GuideConfig {
        &self.cfg
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        self.left.init(&mut store, &mut rng)?;
        self.right.init(&mut store, &mut rng)?;
        self.z_proj.init(&mut store, &mut rng)?;
        self.loc.init(&mut store, &mut rng)?;
        self.scale.init(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn check_params(&self, store: &ParameterStore) -> Result<()> {
        let reference = self.init_params(0)?;
        for (name, p) in reference.iter() {
            match store.get(name) {
                Some(q) if q.shape() == p.shape() => {}
                _ => return Err(Error::Model(format!("guide parameter {name:?} missing or misshaped"))),
            }
        }
        if store.len() != reference.len() {
            return Err(Error::Model("guide store has unexpected entries".into()));
        }
        Ok(())
    }

    /// `(h_left(t), h_right(t))` for every step; `None` marks an empty side.
    pub fn context_on_tape(
        &self,
        tape: &mut Tape,
        phi: &BoundParams,
        xs: &[Var],
    ) -> Result<Vec<(Option<Var>, Option<Var>)>> {
        let l = xs.len();
        if l == 0 {
            return Err(Error::Model("guide needs a non-empty window".into()));
        }
        let mut out = vec![(None, None); l];
        if l > 1 {
            let fwd = self.left.forward(tape, phi, &xs[..l - 1], Direction::Forward)?;
            let bwd = self.right.forward(tape, phi, &xs[1..], Direction::Backward)?;
            for (t, slot) in out.iter_mut().enumerate() {
                if t > 0 {
                    slot.0 = Some(fwd[t - 1]);
                }
                if t + 1 < l {
                    slot.1 = Some(bwd[l - 2 - t]);
                }
            }
        }
        Ok(out)
    }

    /// Step posterior `(mean, std)` given the previous latent and context.
    pub fn step_on_tape(
        &self,
        tape: &mut Tape,
        phi: &BoundParams,
        z_prev: Var,
        context: (Option<Var>, Option<Var>),
    ) -> Result<(Var, Var)> {
        let mut h = self.z_proj.forward(tape, phi, z_prev)?;
        for side in [context.0, context.1].into_iter().flatten() {
            h = tape.add(h, side)?;
        }
        let h = tape.scale_shift(h, 1.0 / 3.0, 0.0);
        let mean = self.loc.forward(tape, phi, h)?;
        let sp = self.scale.forward(tape, phi, mean)?;
        Ok((mean, tape.scale_shift(sp, 1.0, STD_FLOOR)))
    }

    /// Reparameterized pass: `noise[t]` is the standard-normal draw for step `t`.
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        dmm: &Dmm,
        theta: &BoundParams,
        phi: &BoundParams,
        xs: &[Var],
        noise: &[Vec<f64>],
    ) -> Result<GuidePass> {
        if noise.len() != xs.len() {
            return Err(Error::shape("guide noise steps", xs.len(), noise.len()));
        }
        let context = self.context_on_tape(tape, phi, xs)?;
        let (mut z_prev, _) = dmm.initial_on_tape(tape, theta)?;
        let mut zs = Vec::with_capacity(xs.len());
        let mut terms = Vec::with_capacity(xs.len());
        for (ctx, eps) in context.into_iter().zip(noise) {
            let (m, s) = self.step_on_tape(tape, phi, z_prev, ctx)?;
            let z = tape.reparam(m, s, eps.clone())?;
            terms.push((tape.gaussian_log_pdf(z, m, s)?, 1.0));
            zs.push(z);
            z_prev = z;
        }
        let log_q = tape.weighted_sum(&terms)?;
        Ok(GuidePass { z: zs, log_q })
    }

    /// Log-density of a given latent path under the guide.
    pub fn score_on_tape(
        &self,
        tape: &mut Tape,
        dmm: &Dmm,
        theta: &BoundParams,
        phi: &BoundParams,
        xs: &[Var],
        zs: &[Var],
    ) -> Result<Var> {
        if zs.len() != xs.len() {
            return Err(Error::shape("guide latent steps", xs.len(), zs.len()));
        }
        let context = self.context_on_tape(tape, phi, xs)?;
        let (mut z_prev, _) = dmm.initial_on_tape(tape, theta)?;
        let mut terms = Vec::with_capacity(xs.len());
        for (ctx, &z) in context.into_iter().zip(zs) {
            let (m, s) = self.step_on_tape(tape, phi, z_prev, ctx)?;
            terms.push((tape.gaussian_log_pdf(z, m, s)?, 1.0));
            z_prev = z;
        }
        tape.weighted_sum(&terms)
    }

    fn check_window(&self, window: &LagWindow) -> Result<()> {
        if window.n_workers() != self.cfg.n_workers {
            return Err(Error::Model(format!(
                "window has {} workers, guide expects {}",
                window.n_workers(),
                self.cfg.n_workers
            )));
        }
        Ok(())
    }

    pub fn standard_noise(&self, rng: &mut impl Rng, steps: usize) -> Vec<Vec<f64>> {
        (0..steps)
            .map(|_| (0..self.cfg.d_z).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    /// Draws `z_1..z_l ~ q(. | window)` for an already normalized window.
    pub fn sample(
        &self,
        dmm: &Dmm,
        theta: &ParameterStore,
        phi: &ParameterStore,
        window: &LagWindow,
        rng: &mut impl Rng,
    ) -> Result<PosteriorSample> {
        self.check_window(window)?;
        let noise = self.standard_noise(rng, window.lag());
        let mut tape = Tape::new();
        let tb = tape.bind(theta);
        let pb = tape.bind(phi);
        let xs: Vec<Var> = window.rows().iter().map(|r| tape.constant(r.clone())).collect();
        let pass = self.sample_on_tape(&mut tape, dmm, &tb, &pb, &xs, &noise)?;
        let z: Vec<Vec<f64>> = pass.z.iter().map(|&v| tape.value(v).to_vec()).collect();
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Model("guide produced a non-finite latent".into()));
        }
        Ok(PosteriorSample {
            z,
            log_q: tape.scalar(pass.log_q),
        })
    }

    pub fn posterior_sample(
        &self,
        dmm: &Dmm,
        theta: &ParameterStore,
        phi: &ParameterStore,
        window: &LagWindow,
        seed: u64,
    ) -> Result<PosteriorSample> {
        self.sample(dmm, theta, phi, window, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn log_q(
        &self,
        dmm: &Dmm,
        theta: &ParameterStore,
        phi: &ParameterStore,
        window: &LagWindow,
        zs: &[Vec<f64>],
    ) -> Result<f64> {
        self.check_window(window)?;
        let mut tape = Tape::new();
        let tb = tape.bind(theta);
        let pb = tape.bind(phi);
        let xs: Vec<Var> = window.rows().iter().map(|r| tape.constant(r.clone())).collect();
        let zv: Vec<Var> = zs.iter().map(|z| tape.constant(z.clone())).collect();
        let out = self.score_on_tape(&mut tape, dmm, &tb, &pb, &xs, &zv)?;
        Ok(tape.scalar(out))
    }

    /// Step posterior for explicit inputs, mainly for inspection.
    pub fn step(
        &self,
        phi: &ParameterStore,
        z_prev: &[f64],
        h_left: Option<&[f64]>,
        h_right: Option<&[f64]>,
    ) -> Result<GaussianVector> {
        let mut tape = Tape::new();
        let pb = tape.bind(phi);
        let z = tape.constant(z_prev.to_vec());
        let l = h_left.map(|h| tape.constant(h.to_vec()));
        let r = h_right.map(|h| tape.constant(h.to_vec()));
        let out = self.step_on_tape(&mut tape, &pb, z, (l, r))?;
        Ok(GaussianVector::from_tape(&tape, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmm::DmmConfig;

    fn setup() -> (Dmm, Guide, ParameterStore, ParameterStore) {
        let dmm = Dmm::new(DmmConfig {
            d_z: 3,
            n_workers: 4,
            transition_hidden: 5,
            emission_hidden: 5,
        })
        .unwrap();
        let guide = Guide::new(GuideConfig {
            d_z: 3,
            n_workers: 4,
            hidden: 6,
        })
        .unwrap();
        let theta = dmm.init_params(1).unwrap();
        let phi = guide.init_params(2).unwrap();
        (dmm, guide, theta, phi)
    }

    fn window(l: usize) -> LagWindow {
        LagWindow::new(
            (0..l)
                .map(|t| (0..4).map(|w| 0.3 + 0.05 * (t + w) as f64).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sample_shapes_and_determinism() {
        let (dmm, guide, theta, phi) = setup();
        let w = window(5);
        let a = guide.posterior_sample(&dmm, &theta, &phi, &w, 7).unwrap();
        assert_eq!(a.z.len(), 5);
        assert!(a.z.iter().all(|z| z.len() == 3));
        assert_eq!(a, guide.posterior_sample(&dmm, &theta, &phi, &w, 7).unwrap());
        assert_ne!(a, guide.posterior_sample(&dmm, &theta, &phi, &w, 8).unwrap());
    }

    #[test]
    fn rescoring_matches_sampling_log_density() {
        let (dmm, guide, theta, phi) = setup();
        let w = window(4);
        let s = guide.posterior_sample(&dmm, &theta, &phi, &w, 3).unwrap();
        let lq = guide.log_q(&dmm, &theta, &phi, &w, &s.z).unwrap();
        assert!((lq - s.log_q).abs() < 1e-10);
    }

    #[test]
    fn single_step_window_uses_no_recurrent_context() {
        let (dmm, guide, theta, phi) = setup();
        let w = window(1);
        let s = guide.posterior_sample(&dmm, &theta, &phi, &w, 3).unwrap();
        // With both sides empty the step depends only on the initial mean.
        let z0 = dmm.initial(&theta).unwrap().mean;
        let q = guide.step(&phi, &z0, None, None).unwrap();
        assert!((s.log_q - q.log_pdf(&s.z[0])).abs() < 1e-10);
    }

    #[test]
    fn boundary_steps_see_one_side_only() {
        let (_, guide, _, phi) = setup();
        let mut tape = Tape::new();
        let pb = tape.bind(&phi);
        let xs: Vec<Var> = window(4).rows().iter().map(|r| tape.constant(r.clone())).collect();
        let ctx = guide.context_on_tape(&mut tape, &pb, &xs).unwrap();
        assert!(ctx[0].0.is_none() && ctx[0].1.is_some());
        assert!(ctx[3].0.is_some() && ctx[3].1.is_none());
        assert!(ctx[1].0.is_some() && ctx[2].1.is_some());
    }

    #[test]
    fn combiner_averages_three_terms() {
        let (_, guide, _, mut phi) = setup();
        // Identity-like readout makes the mean equal the combined hidden state.
        let mut w = vec![0.0; 3 * 6];
        for i in 0..3 {
            w[i * 6 + i] = 1.0;
        }
        phi.set_value("guide.loc.0.weight", &w).unwrap();
        let z = [0.2, -0.4, 0.1];
        let hl = [0.3, 0.6, 0.9, 0.0, 0.0, 0.0];
        let hr = [0.6, 0.0, 0.3, 0.0, 0.0, 0.0];
        let q = guide.step(&phi, &z, Some(&hl), Some(&hr)).unwrap();

        let pw = phi.value("guide.z_proj.0.weight").unwrap();
        for i in 0..3 {
            let pre: f64 = (0..3).map(|j| pw[i * 3 + j] * z[j]).sum();
            let expected = (pre.tanh() + hl[i] + hr[i]) / 3.0;
            assert!((q.mean[i] - expected).abs() < 1e-12);
        }
        assert!(q.std.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn sampled_latents_follow_step_moments() {
        let (dmm, guide, theta, phi) = setup();
        let w = window(1);
        let z0 = dmm.initial(&theta).unwrap().mean;
        let q = guide.step(&phi, &z0, None, None).unwrap();
        let n = 5000;
        let draws: Vec<f64> = (0..n)
            .map(|s| guide.posterior_sample(&dmm, &theta, &phi, &w, s).unwrap().z[0][1])
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        assert!((m - q.mean[1]).abs() < 4.0 * q.std[1] / (n as f64).sqrt());
    }

    #[test]
    fn wrong_worker_count_is_a_model_error() {
        let (dmm, guide, theta, phi) = setup();
        let w = LagWindow::new(vec![vec![0.5; 3]; 2]).unwrap();
        assert!(matches!(
            guide.posterior_sample(&dmm, &theta, &phi, &w, 0),
            Err(Error::Model(_))
        ));
    }
}
