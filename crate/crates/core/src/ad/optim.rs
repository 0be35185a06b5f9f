use serde::{Deserialize, Serialize};

use super::{AdError, ParamStore};

/// AdamW with global-norm clipping applied before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            clip: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were multiplied by (1 when unclipped).
    pub clip_scale: f64,
}

impl AdamW {
    /// One decoupled-weight-decay Adam update with learning rate `lr`.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&self, store: &mut ParamStore, lr: f64) -> Result<StepStats, AdError> {
        for (name, p) in store.entries() {
            if !p.grad.is_finite() {
                return Err(AdError::NonFiniteGradient(name.clone()));
            }
        }
        let grad_norm = store.grad_norm();
        let clip_scale = if self.clip > 0.0 && grad_norm > self.clip {
            self.clip / grad_norm
        } else {
            1.0
        };

        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (_, p) in store.entries_mut() {
            let super::params::Param { value, grad, m, v } = p;
            let moments = m.data_mut().iter_mut().zip(v.data_mut());
            for ((theta, g), (mi, vi)) in value.data_mut().iter_mut().zip(grad.data()).zip(moments) {
                let g = g * clip_scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + self.eps)) + lr * self.weight_decay * *theta;
            }
        }
        Ok(StepStats { grad_norm, clip_scale })
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}
