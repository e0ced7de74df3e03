//! Finite-difference checks on seeded small shapes. Each returns the worst
//! relative error over every checked scalar.

use cutoff_core::dmm::{Dmm, DmmConfig};
use cutoff_core::guide::{Guide, GuideConfig};
use cutoff_core::ndmath::{Activation, BoundParams, Direction, Mlp, MlpSpec, ParameterStore, Rnn, Tape, Var};
use cutoff_core::trace::LagWindow;
use cutoff_core::trainer::RuntimeModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_fd_error, random_projection, standard_normals, tape_gradient, tape_value};

const D: usize = 3;
const N: usize = 4;

fn dmm() -> Dmm {
    Dmm::new(DmmConfig {
        d_z: D,
        n_workers: N,
        transition_hidden: 5,
        emission_hidden: 6,
    })
    .unwrap()
}

fn guide() -> Guide {
    Guide::new(GuideConfig {
        d_z: D,
        n_workers: N,
        hidden: 5,
    })
    .unwrap()
}

/// Perturbs every scalar so no parameter sits at a special value.
fn jitter(store: &mut ParameterStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        for v in p.value_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn window(seed: u64, lag: usize) -> LagWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LagWindow::new(
        (0..lag)
            .map(|_| (0..N).map(|_| rng.random_range(0.3..0.8)).collect())
            .collect(),
    )
    .unwrap()
}

fn check(store: &ParameterStore, build: impl Fn(&mut Tape, &BoundParams) -> Var) -> f64 {
    let (_, analytic) = tape_gradient(store, &build);
    max_fd_error(store, &analytic, &|s| tape_value(s, &build))
}

/// Every tape operation in one objective.
pub fn primitives() -> f64 {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for (name, len) in [("w", 12), ("b", 3), ("x", 4), ("u", 3), ("s", 3)] {
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.insert(name, &[len], v).unwrap();
    }
    check(&store, |tape, p| {
        let (w, b, x, u, s) = (
            p.get("w").unwrap(),
            p.get("b").unwrap(),
            p.get("x").unwrap(),
            p.get("u").unwrap(),
            p.get("s").unwrap(),
        );
        let a = tape.affine("fd", w, Some(b), x, 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut terms = Vec::new();
        for act in [
            Activation::Identity,
            Activation::Relu,
            Activation::Sigmoid,
            Activation::Tanh,
            Activation::Softplus,
        ] {
            let h = tape.activation(act, a);
            terms.push((random_projection(tape, h, &mut rng), 1.0));
        }
        let sum = tape.add(a, u).unwrap();
        let diff = tape.sub(sum, s).unwrap();
        let prod = tape.mul(diff, u).unwrap();
        let shifted = tape.scale_shift(prod, 0.7, -0.2);
        terms.push((tape.sum(shifted), 0.5));
        let std = tape.activation(Activation::Softplus, s);
        let z = tape.reparam(u, std, vec![0.3, -1.1, 0.8]).unwrap();
        terms.push((tape.gaussian_log_pdf(a, z, std).unwrap(), -1.3));
        tape.weighted_sum(&terms).unwrap()
    })
}

pub fn mlp() -> f64 {
    let mlp = Mlp::new(
        "net",
        MlpSpec::new(vec![4, 8, 3], vec![Activation::Relu, Activation::Sigmoid]).unwrap(),
    );
    let mut store = ParameterStore::new();
    mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    jitter(&mut store, 2, 0.1);
    let x = vec![0.3, -0.7, 1.1, 0.2];
    check(&store, |tape, p| {
        let xv = tape.constant(x.clone());
        let y = mlp.forward(tape, p, xv).unwrap();
        random_projection(tape, y, &mut ChaCha8Rng::seed_from_u64(3))
    })
}

/// Worst error over both directions on a length-5 sequence.
pub fn rnn() -> f64 {
    let rnn = Rnn::new("rnn", 3, 4);
    let mut store = ParameterStore::new();
    rnn.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    jitter(&mut store, 5, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs: Vec<Vec<f64>> = (0..5).map(|_| standard_normals(&mut rng, 3)).collect();
    [Direction::Forward, Direction::Backward]
        .into_iter()
        .map(|dir| {
            check(&store, |tape, p| {
                let inputs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
                let hs = rnn.forward(tape, p, &inputs, dir).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let terms: Vec<(Var, f64)> = hs
                    .iter()
                    .map(|&h| (random_projection(tape, h, &mut rng), 1.0))
                    .collect();
                tape.weighted_sum(&terms).unwrap()
            })
        })
        .fold(0.0, f64::max)
}

pub fn transition() -> f64 {
    let model = dmm();
    let mut theta = model.init_params(8).unwrap();
    jitter(&mut theta, 9, 0.2);
    let z = vec![0.4, -0.3, 0.9];
    check(&theta, |tape, p| {
        let zv = tape.constant(z.clone());
        let (m, s) = model.transition_on_tape(tape, p, zv).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_projection(tape, m, &mut rng);
        let b = random_projection(tape, s, &mut rng);
        tape.weighted_sum(&[(a, 1.0), (b, 1.0)]).unwrap()
    })
}

pub fn emission() -> f64 {
    let model = dmm();
    let mut theta = model.init_params(11).unwrap();
    jitter(&mut theta, 12, 0.2);
    let z = vec![-0.2, 0.5, 0.1];
    check(&theta, |tape, p| {
        let zv = tape.constant(z.clone());
        let (m, s) = model.emission_on_tape(tape, p, zv).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_projection(tape, m, &mut rng);
        let b = random_projection(tape, s, &mut rng);
        tape.weighted_sum(&[(a, 1.0), (b, 1.0)]).unwrap()
    })
}

pub fn log_joint() -> f64 {
    let model = dmm();
    let mut theta = model.init_params(14).unwrap();
    jitter(&mut theta, 15, 0.2);
    let w = window(16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let zs: Vec<Vec<f64>> = (0..4).map(|_| standard_normals(&mut rng, D)).collect();
    check(&theta, |tape, p| {
        let zv: Vec<Var> = zs.iter().map(|z| tape.constant(z.clone())).collect();
        let xv: Vec<Var> = w.rows().iter().map(|x| tape.constant(x.clone())).collect();
        model.log_joint_on_tape(tape, p, &zv, &xv).unwrap()
    })
}

/// Step moments over a whole window, so the error covers both recurrences.
pub fn guide_step() -> f64 {
    let g = guide();
    let mut phi = g.init_params(18).unwrap();
    jitter(&mut phi, 19, 0.2);
    let w = window(20, 5);
    let z_prev = vec![0.2, -0.6, 0.3];
    check(&phi, |tape, p| {
        let xs: Vec<Var> = w.rows().iter().map(|x| tape.constant(x.clone())).collect();
        let context = g.context_on_tape(tape, p, &xs).unwrap();
        let zv = tape.constant(z_prev.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut terms = Vec::new();
        for ctx in context {
            let (m, s) = g.step_on_tape(tape, p, zv, ctx).unwrap();
            terms.push((random_projection(tape, m, &mut rng), 1.0));
            terms.push((random_projection(tape, s, &mut rng), 1.0));
        }
        tape.weighted_sum(&terms).unwrap()
    })
}

/// ELBO with fixed reparameterization noise; worst error over the
/// generative and guide stores.
pub fn elbo() -> f64 {
    let model = RuntimeModel::new(*dmm().config(), *guide().config()).unwrap();
    let mut theta = model.dmm.init_params(22).unwrap();
    let mut phi = model.guide.init_params(23).unwrap();
    jitter(&mut theta, 24, 0.1);
    jitter(&mut phi, 25, 0.1);
    let w = window(26, 5);
    let g = model.elbo_grad(&theta, &phi, &w, 27, 2).unwrap();
    assert_eq!(g.value, model.elbo(&theta, &phi, &w, 27, 2).unwrap());
    let theta_err = max_fd_error(&theta, &g.theta, &|t| model.elbo(t, &phi, &w, 27, 2).unwrap());
    let phi_err = max_fd_error(&phi, &g.phi, &|p| model.elbo(&theta, p, &w, 27, 2).unwrap());
    theta_err.max(phi_err)
}
