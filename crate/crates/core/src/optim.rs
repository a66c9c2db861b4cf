//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moment buffers for one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

/// One AdamW update of `param` in place.
///
/// Decay is applied to the weights directly (`w ← w·(1 − lr·λ)`), never
/// folded into the gradient. Moments are bias-corrected with the
/// per-parameter step count.
pub fn adamw_step(
    param: &mut [f32],
    grad: &[f32],
    state: &mut Moments,
    lr: f32,
    cfg: &AdamWConfig,
    decay: bool,
) {
    if state.m.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let shrink = if decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
    for i in 0..param.len() {
        let g = grad[i];
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param[i] = param[i] * shrink - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        AdamW {
            config,
            state: vec![Moments::default(); num_params],
        }
    }

    /// Updates every parameter that has a gradient. `lr_scale`, when given,
    /// multiplies the learning rate per parameter (layer-wise decay).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f32>>],
        lr: f32,
        lr_scale: Option<&[f32]>,
    ) -> Result<()> {
        if grads.len() != store.len() || self.state.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} params, store has {}, got {} grads",
                self.state.len(),
                store.len(),
                grads.len()
            )));
        }
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let lr_i = lr * lr_scale.map_or(1.0, |s| s[i]);
            adamw_step(p.tensor.data_mut(), g, &mut self.state[i], lr_i, &self.config, p.decay);
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to `min_lr` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    /// Learning rate at 0-based `step`: `peak·(step+1)/warmup` during warmup,
    /// `peak` at `step == warmup`, `min_lr` at `step == total − 1`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let last = self.total_steps.saturating_sub(1);
        if step >= last {
            return self.min_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (last - self.warmup_steps) as f64;
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
