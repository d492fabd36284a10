use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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
            weight_decay: 0.01,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(n_params: usize, config: AdamWConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// Decoupled weight decay then the bias-corrected Adam update:
/// `w ← w·(1 − ηλ) − η·m̂/(√v̂ + ε)`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} ({}) at optimizer step {}",
            grads[i],
            state.step + 1
        )));
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - lr * c.weight_decay;
    for (((w, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *w *= decay;
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub initial_lr: f64,
    pub max_lr: f64,
    /// Zero means "epochs × steps per epoch" when training.
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub final_lr_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-6,
            max_lr: 1.5e-5,
            total_steps: 0,
            warmup_fraction: 0.3,
            final_lr_fraction: 1e-4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr <= self.max_lr) {
            return Err(Error::Config("schedule needs 0 < initial_lr ≤ max_lr".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config("final_lr_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Step at which the rate peaks.
    pub fn peak_step(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }
}

/// Cosine ramp `initial → max` until the peak step, then cosine anneal
/// `max → max·final_lr_fraction` at `total_steps`.
pub fn onecycle_lr(s: &ScheduleConfig, step: usize) -> Result<f64> {
    s.validate()?;
    if s.total_steps == 0 || step > s.total_steps {
        return Err(Error::OutOfRange(format!(
            "step {step} outside schedule of {} steps",
            s.total_steps
        )));
    }
    let peak = s.peak_step();
    let (from, to, frac) = if step <= peak && peak > 0 {
        (s.initial_lr, s.max_lr, step as f64 / peak as f64)
    } else {
        let span = (s.total_steps - peak).max(1) as f64;
        (s.max_lr, s.max_lr * s.final_lr_fraction, (step - peak) as f64 / span)
    };
    let w = 0.5 * (1.0 - (std::f64::consts::PI * frac).cos());
    Ok(to * w + from * (1.0 - w))
}
