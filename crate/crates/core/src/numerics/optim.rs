//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::{Gradients, ParamStore, Trainable, TrainableSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_ratio: 0.03,
        }
    }
}

/// Linear warmup from 0 over the first `warmup_ratio` of steps, then cosine
/// decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: u64, warmup_ratio: f64) -> Self {
        let warmup_steps = if total_steps == 0 {
            0
        } else {
            ((warmup_ratio * total_steps as f64).ceil() as u64).clamp(1, total_steps)
        };
        CosineSchedule {
            base_lr,
            total_steps,
            warmup_steps,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
    pub(crate) step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |_: ()| store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            config,
            m: zeros(()),
            v: zeros(()),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(config: AdamWConfig, m: Vec<Tensor>, v: Vec<Tensor>, step: u64) -> Self {
        AdamW { config, m, v, step }
    }

    /// One update of every non-frozen parameter. Fails before touching any
    /// parameter if a trainable gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        trainable: &TrainableSet,
    ) -> Result<()> {
        for id in params.ids() {
            if !trainable.is_frozen(id) && !grads.get(id).is_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in params.ids() {
            let mode = trainable.get(id);
            if mode.is_frozen() {
                continue;
            }
            let p = params.get_mut(id);
            // Vectors (biases, norm gains) are not decayed.
            let wd = if p.ndim() >= 2 { c.weight_decay } else { 0.0 };
            let cols = p.cols();
            let g = grads.get(id).data();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let pd = p.data_mut();
            let mut update = |i: usize| {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * pd[i]);
            };
            match mode {
                Trainable::Frozen => {}
                Trainable::Full => (0..g.len()).for_each(&mut update),
                Trainable::Rows(rows) => {
                    for &r in rows {
                        (r * cols..(r + 1) * cols).for_each(&mut update);
                    }
                }
            }
        }
        Ok(())
    }
}
