//! AdamW with decoupled weight decay, global-norm clipping and the learning
//! rate schedule, all over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

/// `lr_min + (base - lr_min) * (1 + cos(pi * step / total)) / 2` for cosine,
/// `base` for constant.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, lr_min: f64, schedule: Schedule) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond schedule length {total_steps}")));
    }
    Ok(match schedule {
        Schedule::Constant => base_lr,
        Schedule::Cosine if total_steps == 0 => base_lr,
        Schedule::Cosine => {
            let frac = step as f64 / total_steps as f64;
            lr_min + 0.5 * (base_lr - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    })
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moment estimates plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        Self { m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0 }
    }

    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &AdamWConfig) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - lr * cfg.weight_decay;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
