use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::numerics::{Gradients, Tape, Tensor};
use crate::params::{Binder, ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip: Some(2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were multiplied by (1 when not clipped).
    pub clip_scale: f64,
}

/// Adam with decoupled weight decay and global-norm clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    t: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

/// Global-norm clipping factor: `min(1, clip / ‖g‖)`.
pub fn clip_scale(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) || config.clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidConfig("learning rate and clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) || config.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("betas must lie in [0,1) and weight decay be non-negative".into()));
        }
        Ok(AdamW {
            config,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Clips the gradients jointly, then updates each listed parameter.
    /// Parameters not listed are left untouched, weight decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<StepStats> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of `{}`", store.entry(*id).name),
                });
            }
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape("adamw", store.get(*id).shape(), g.shape()));
            }
        }
        let norm = libm::sqrt(grads.iter().map(|(_, g)| g.norm_sq()).sum::<f64>());
        let scale = clip_scale(norm, self.config.clip);
        self.t += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        for (id, g) in grads {
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (alloc::vec![0.0; n], alloc::vec![0.0; n]));
            let p = store.get_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i] * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * weight_decay * p[i];
                p[i] -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clip_scale: scale,
        })
    }
}

/// Gradients of every trainable parameter the binder placed on the tape.
pub fn collect_grads(tape: &Tape, binder: &Binder<'_>, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
    binder
        .trainable_vars()
        .map(|(id, var)| (id, grads.get_or_zeros(tape, var)))
        .collect()
}
