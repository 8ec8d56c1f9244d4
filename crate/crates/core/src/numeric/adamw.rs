//! AdamW with decoupled weight decay, plus learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// A trainable gradient was NaN/Inf; no parameter or moment changed.
    Skipped {
        param: String,
    },
}

/// Optimizer state: first/second moments per parameter, aligned with the
/// store order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    skipped: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            skipped: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores state saved with [`AdamW::moments`] and [`AdamW::step_count`].
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer moment count mismatch".into()));
        }
        for (a, b) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            a.ensure_same_shape(b, "AdamW::restore")?;
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update of every trainable parameter with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<StepOutcome> {
        if self.m.len() != params.len() {
            return Err(Error::Checkpoint(
                "optimizer built for a different store".into(),
            ));
        }
        for (name, p) in params.iter_mut() {
            if p.trainable && !p.grad.is_finite() {
                self.skipped += 1;
                return Ok(StepOutcome::Skipped {
                    param: name.to_string(),
                });
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((_, p), m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let g = p.grad.data();
            let w = p.value.data_mut();
            for k in 0..w.len() {
                let mk = &mut m.data_mut()[k];
                *mk = beta1 * *mk + (1.0 - beta1) * g[k];
                let vk = &mut v.data_mut()[k];
                *vk = beta2 * *vk + (1.0 - beta2) * g[k] * g[k];
                let mhat = *mk / bc1;
                let vhat = *vk / bc2;
                w[k] -= lr * weight_decay * w[k];
                w[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Learning rate as a function of the optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScheduler {
    Constant,
    /// Linear warm-up over `warmup_ratio · total` steps, then cosine decay to 0.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub kind: LrScheduler,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.kind {
            LrScheduler::Constant => self.base_lr,
            LrScheduler::Cosine => {
                let total = self.total_steps.max(1) as f64;
                let warmup = (self.warmup_ratio * total).ceil();
                let s = step as f64;
                if s < warmup {
                    self.base_lr * (s + 1.0) / warmup
                } else {
                    let progress = ((s - warmup) / (total - warmup).max(1.0)).min(1.0);
                    0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}
