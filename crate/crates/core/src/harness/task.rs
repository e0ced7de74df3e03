//! Toy learning task: logistic or least-squares regression on a seeded
//! synthetic dataset, with per-(iteration, worker) with-replacement sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::sigmoid;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub loss: LossKind,
    pub n_points: usize,
    pub val_fraction: f64,
    pub dim: usize,
    /// Distance of each class mean from the origin, in noise stds.
    pub separation: f64,
    /// Mini-batch size `m`, split evenly across workers.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Logistic,
            n_points: 10_000,
            val_fraction: 0.2,
            dim: 10,
            separation: 1.0,
            batch_size: 632,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Dataset, loss and step size. Parameters are the feature weights followed
/// by a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub cfg: TaskConfig,
    pub train: Dataset,
    pub val: Dataset,
}

impl ToyTask {
    pub fn new(cfg: TaskConfig) -> Result<Self> {
        if cfg.n_points < 2 || cfg.dim == 0 || cfg.batch_size == 0 {
            return Err(Error::Config(
                "task needs points, features and a positive batch size".into(),
            ));
        }
        if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) || !(cfg.lr > 0.0) {
            return Err(Error::Config(
                "validation fraction must be in (0, 1) and lr positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[cfg.seed, 100]));
        let mut direction: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        direction.iter_mut().for_each(|v| *v /= norm);
        let truth: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();

        let mut features = Vec::with_capacity(cfg.n_points);
        let mut labels = Vec::with_capacity(cfg.n_points);
        for _ in 0..cfg.n_points {
            let noise: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            match cfg.loss {
                LossKind::Logistic => {
                    let y = f64::from(rng.random::<bool>());
                    let sign = 2.0 * y - 1.0;
                    features.push(
                        noise
                            .iter()
                            .zip(&direction)
                            .map(|(e, d)| e + sign * cfg.separation * d)
                            .collect(),
                    );
                    labels.push(y);
                }
                LossKind::LeastSquares => {
                    let e: f64 = rng.sample(StandardNormal);
                    labels.push(dot(&truth, &noise) + 0.5 + 0.3 * e);
                    features.push(noise);
                }
            }
        }
        let n_val = ((cfg.n_points as f64) * cfg.val_fraction).round() as usize;
        let n_train = cfg.n_points - n_val.clamp(1, cfg.n_points - 1);
        let val = Dataset {
            features: features.split_off(n_train),
            labels: labels.split_off(n_train),
        };
        Ok(Self {
            cfg,
            train: Dataset { features, labels },
            val,
        })
    }

    pub fn n_params(&self) -> usize {
        self.cfg.dim + 1
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        vec![0.0; self.n_params()]
    }

    /// Examples per worker; errors unless `m` divides evenly.
    pub fn per_worker(&self, n_workers: usize) -> Result<usize> {
        if n_workers == 0 || !self.cfg.batch_size.is_multiple_of(n_workers) {
            return Err(Error::Config(format!(
                "batch size {} is not divisible by {n_workers} workers",
                self.cfg.batch_size
            )));
        }
        Ok(self.cfg.batch_size / n_workers)
    }

    fn predict(&self, theta: &[f64], x: &[f64]) -> f64 {
        dot(&theta[..self.cfg.dim], x) + theta[self.cfg.dim]
    }

    fn example_loss(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        let s = self.predict(theta, x);
        match self.cfg.loss {
            // log(1 + e^s) - y s, computed stably.
            LossKind::Logistic => crate::ndmath::softplus(s) - y * s,
            LossKind::LeastSquares => 0.5 * (s - y).powi(2),
        }
    }

    fn add_example_grad(&self, theta: &[f64], x: &[f64], y: f64, weight: f64, out: &mut [f64]) {
        let s = self.predict(theta, x);
        let r = match self.cfg.loss {
            LossKind::Logistic => sigmoid(s) - y,
            LossKind::LeastSquares => s - y,
        } * weight;
        for (o, xi) in out.iter_mut().zip(x) {
            *o += r * xi;
        }
        out[self.cfg.dim] += r;
    }

    pub fn mean_loss(&self, theta: &[f64], data: &Dataset) -> f64 {
        let total: f64 = data
            .features
            .iter()
            .zip(&data.labels)
            .map(|(x, &y)| self.example_loss(theta, x, y))
            .sum();
        total / data.len() as f64
    }

    pub fn train_loss(&self, theta: &[f64]) -> f64 {
        self.mean_loss(theta, &self.train)
    }

    pub fn val_loss(&self, theta: &[f64]) -> f64 {
        self.mean_loss(theta, &self.val)
    }

    /// Gradient of the mean training loss over all training examples.
    pub fn full_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n_params()];
        let w = 1.0 / self.train.len() as f64;
        for (x, &y) in self.train.features.iter().zip(&self.train.labels) {
            self.add_example_grad(theta, x, y, w, &mut g);
        }
        g
    }

    /// Training indices drawn with replacement by `worker` in `iteration`.
    /// They depend only on the seed, iteration and worker.
    pub fn sample_indices(&self, run_seed: u64, iteration: usize, worker: usize, count: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[run_seed, 200, iteration as u64, worker as u64]));
        (0..count).map(|_| rng.random_range(0..self.train.len())).collect()
    }

    /// Sub-mini-batch mean gradient `f_w`.
    pub fn worker_gradient(
        &self,
        theta: &[f64],
        run_seed: u64,
        iteration: usize,
        worker: usize,
        count: usize,
    ) -> Vec<f64> {
        let mut g = vec![0.0; self.n_params()];
        let w = 1.0 / count as f64;
        for i in self.sample_indices(run_seed, iteration, worker, count) {
            self.add_example_grad(theta, &self.train.features[i], self.train.labels[i], w, &mut g);
        }
        g
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(loss: LossKind) -> ToyTask {
        ToyTask::new(TaskConfig {
            loss,
            n_points: 500,
            dim: 3,
            batch_size: 8,
            ..TaskConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn split_sizes() {
        let t = ToyTask::new(TaskConfig::default()).unwrap();
        assert_eq!(t.train.len(), 8000);
        assert_eq!(t.val.len(), 2000);
        assert_eq!(t.per_worker(158).unwrap(), 4);
        assert!(t.per_worker(100).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for loss in [LossKind::Logistic, LossKind::LeastSquares] {
            let t = small(loss);
            let theta = vec![0.3, -0.2, 0.5, 0.1];
            let g = t.full_gradient(&theta);
            for i in 0..4 {
                let h = 1e-6;
                let mut up = theta.clone();
                up[i] += h;
                let mut down = theta.clone();
                down[i] -= h;
                let numeric = (t.train_loss(&up) - t.train_loss(&down)) / (2.0 * h);
                assert!((numeric - g[i]).abs() < 1e-6 * numeric.abs().max(1.0), "{loss:?} {i}");
            }
        }
    }

    #[test]
    fn sampling_is_per_worker_and_iteration() {
        let t = small(LossKind::Logistic);
        assert_eq!(t.sample_indices(1, 5, 2, 4), t.sample_indices(1, 5, 2, 4));
        assert_ne!(t.sample_indices(1, 5, 2, 4), t.sample_indices(1, 5, 3, 4));
        assert_ne!(t.sample_indices(1, 5, 2, 4), t.sample_indices(1, 6, 2, 4));
    }

    #[test]
    fn logistic_loss_at_zero_is_ln2() {
        let t = small(LossKind::Logistic);
        assert!((t.val_loss(&t.initial_theta()) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
