//! Decoupled-weight-decay Adam and the cosine learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 3.0,
        }
    }
}

/// Per-step cosine annealing from `base_lr` to 0 over `total_steps`,
/// without restarts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let progress = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        0.5 * self.base_lr * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

/// Moment estimates of one peer's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// One update: `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: f64, cfg: &AdamWConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - libm::pow(b1, self.step as f64);
        let bc2 = 1.0 - libm::pow(b2, self.step as f64);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step_size = T::of(lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / libm::sqrt(bc2));
        let eps = T::of(cfg.eps);
        let decay = T::of(1.0 - lr * cfg.weight_decay);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.len() != p.len() || m.len() != p.len() {
                return Err(Error::Shape(format!("gradient of {} for tensor of {}", g.len(), p.len())));
            }
            for (((w, gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1t * *mv + one_b1 * *gv;
                *vv = b2t * *vv + one_b2 * *gv * *gv;
                let denom = vv.sqrt() * inv_sqrt_bc2 + eps;
                *w = *w * decay - step_size * *mv / denom;
            }
        }
        Ok(())
    }
}
