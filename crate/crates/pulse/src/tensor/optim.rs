//! AdamW with decoupled weight decay and the warmup-plus-cosine schedule
//! shared by every training loop in the crate.

use std::collections::BTreeMap;

use crate::error::{PulseError, Result};

use super::{ParamStore, Tensor};

/// Optimizer state: first/second moment estimates per parameter plus the
/// hyperparameters fixed at construction.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the named gradients. Decay is decoupled: it applies to
    /// every parameter in `params` each step, gradient or not.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f32,
    ) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(PulseError::InvalidArgument(format!("bad learning rate {lr}")));
        }
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(PulseError::InvalidArgument(format!(
                    "gradient shape {:?} does not match parameter {name:?} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(PulseError::NumericError(format!(
                    "non-finite gradient for {name:?}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let n = params.get(&name)?.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let zero = vec![0.0f32; n];
            let g = grads.get(&name).map(|t| t.data()).unwrap_or(&zero);

            let mut theta = params.get(&name)?.clone();
            for ((x, &gi), (mi, vi)) in theta
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *x -= lr * self.weight_decay * *x;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            if !theta.is_finite() {
                return Err(PulseError::NumericError(format!(
                    "parameter {name:?} became non-finite"
                )));
            }
            params.set(&name, theta)?;
        }
        params.bump_step();
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Warmup covering the given fraction of total steps, rounded down.
    pub fn warmup_fraction(base_lr: f32, total_steps: u64, fraction: f64) -> Self {
        LrSchedule {
            base_lr,
            warmup_steps: (total_steps as f64 * fraction) as u64,
            total_steps,
        }
    }

    /// Learning rate at a 0-based step index.
    pub fn lr_at(&self, step: u64) -> f32 {
        if step >= self.total_steps {
            return 0.0;
        }
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * step as f32 / self.warmup_steps as f32;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        (self.base_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
    }
}
