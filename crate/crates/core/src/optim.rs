//! SGD with momentum and weight decay, plus the warmup/cosine schedules.

use std::f64::consts::PI;

use crate::error::{param_err, Result};
use crate::params::ParamStore;

/// Momentum SGD state: one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(param_err!("learning rate must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(param_err!("momentum must lie in [0, 1), got {momentum}"));
        }
        if weight_decay < 0.0 {
            return Err(param_err!("weight decay must be nonnegative, got {weight_decay}"));
        }
        let buffers = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            buffers,
        })
    }

    /// `v <- momentum*v + grad + wd*param; param <- param - lr*v`, then zero grads.
    pub fn step(&mut self, params: &mut ParamStore) {
        let ids: Vec<_> = params.ids().collect();
        for (id, v) in ids.into_iter().zip(&mut self.buffers) {
            let t = params.get_mut(id);
            let grad: Vec<f32> = t.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            for ((p, vel), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vel = self.momentum * *vel + g + self.weight_decay * *p;
                *p -= self.lr * *vel;
            }
            t.zero_grad();
        }
    }

    pub fn buffers(&self) -> &[Vec<f32>] {
        &self.buffers
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f32) -> f32 {
    let ids: Vec<_> = params.ids().collect();
    let norm = ids
        .iter()
        .filter_map(|&id| params.get(id).grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f32>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for id in ids {
            if let Some(g) = params.get_mut(id).grad_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    norm
}

/// Half-cosine interpolation from `start` (step 0) to `end` (step `total`).
pub fn cosine_value(step: usize, total: usize, start: f64, end: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(param_err!("cosine step {step} outside [0, {total}]"));
    }
    if step == 0 {
        return Ok(start);
    }
    if step == total {
        return Ok(end);
    }
    let frac = step as f64 / total as f64;
    Ok(start + (end - start) * (1.0 - (PI * frac).cos()) / 2.0)
}

/// Linear warmup to `base`, then cosine decay to zero. Steps are 1-based.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.base * (step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        cosine_value(step - self.warmup_steps, span.max(1), self.base, 0.0).unwrap_or(0.0)
    }
}
