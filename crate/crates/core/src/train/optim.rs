use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Learning-rate schedule: linear warmup from zero, then cosine decay.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Schedule {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr <= self.peak_lr) {
            return Err(Error::invalid("learning rates must satisfy 0 < final_lr <= peak_lr"));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::invalid("warmup_steps must be below total_steps"));
        }
        Ok(())
    }

    /// Rate used for update number `step` (the first update is step 1).
    /// Steps past `total_steps` stay at `final_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.final_lr + 0.5 * (self.peak_lr - self.final_lr) * (1.0 + math::cos(core::f64::consts::PI * progress))
    }
}

/// First and second moments, one buffer per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> AdamW {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamW { config, m, v, t: 0 }
    }

    /// One update: `θ ← θ(1 − lr·λ)`, then `θ ← θ − lr·m̂/(√v̂ + ε)` with
    /// bias-corrected moments.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                op: "AdamW::step tensors",
                expected: self.m.len(),
                found: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::DimensionMismatch {
                    op: "AdamW::step tensor",
                    expected: m.len(),
                    found: p.len().min(g.len()),
                });
            }
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - math::pow(beta1, self.t as f64);
        let c2 = 1.0 - math::pow(beta2, self.t as f64);
        let shrink = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let update = (m[i] / c1) / (math::sqrt(v[i] / c2) + eps);
                p[i] = p[i] * shrink - lr * update;
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all tensors.
pub fn global_norm(grads: &[&[f64]]) -> f64 {
    math::sqrt(grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum())
}
