use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling applied before the update.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

/// Clips the store's gradients to `clip_norm` (global L2 norm), then applies
/// one bias-corrected Adam update. Moment buffers live in the store.
///
/// Returns the gradient norm before clipping.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) -> Result<f64> {
    for (name, p) in store.iter() {
        if p.grad().iter().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient for parameter {name:?}")));
        }
    }
    let norm = store.grad_norm();
    let clip = if norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };

    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (_, p) in store.iter_mut() {
        let (value, grad, m, v) = p.parts_mut();
        for i in 0..value.len() {
            let g = grad[i] * clip;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, g: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("x", &[1], vec![v]).unwrap();
        s.get_mut("x").unwrap().grad_mut()[0] = g;
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(1.5, 0.0);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value("x").unwrap(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0, 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &cfg).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.value("x").unwrap()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_the_effective_gradient() {
        let mut s = ParameterStore::new();
        s.insert("a", &[2], vec![0.0, 0.0]).unwrap();
        s.get_mut("a").unwrap().grad_mut().copy_from_slice(&[600.0, 800.0]);
        let cfg = AdamConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            lr: 1.0,
            clip_norm: 10.0,
        };
        let norm = adam_step(&mut s, &cfg).unwrap();
        assert_eq!(norm, 1000.0);
        // With beta1 = 0 the first moment equals the clipped gradient.
        let m = &s.get("a").unwrap().m;
        let clipped = (m[0] * m[0] + m[1] * m[1]).sqrt();
        assert!((clipped - 10.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_a_training_error() {
        let mut s = scalar_store(0.0, f64::NAN);
        let err = adam_step(&mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains("\"x\"")));
    }
}
