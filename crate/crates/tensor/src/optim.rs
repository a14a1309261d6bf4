//! Variance-rectified Adam and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;

/// RAdam hyperparameters. Defaults follow the original RAdam formulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        RAdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers and step counter for RAdam.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: RAdamConfig,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub base_lr: f64,
    pub total_steps: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: RAdamConfig, base_lr: f64, total_steps: u64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        OptimizerState {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            base_lr,
            total_steps,
        }
    }

    /// Learning rate for the next step under cosine decay.
    pub fn scheduled_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps.max(1), self.base_lr)
    }
}

/// `base_lr · ½ · (1 + cos(π · step / total))`, clamped at the final value
/// once `step` passes `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    let total = total_steps.max(1);
    if step >= total {
        return 0.0;
    }
    base_lr * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Applies one RAdam update in place.
///
/// While the variance of the adaptive learning rate is intractable
/// (`ρ_t ≤ 4`) the update is SGD with bias-corrected momentum.
pub fn radam_step(
    state: &mut OptimizerState,
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(TensorError::GradientCount { expected: params.len(), got: grads.len() });
    }
    for ((id, name, t), g) in params.iter().zip(grads) {
        if g.len() != t.numel() {
            return Err(TensorError::shape("radam", format!("gradient for `{name}` has wrong length")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFiniteGradient { param: params.name(id).to_string() });
        }
    }

    let RAdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let beta2_t = beta2.powf(t);
    let bc2 = 1.0 - beta2_t;
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let rho_t = rho_inf - 2.0 * t * beta2_t / bc2;
    let rect = if rho_t > 4.0 {
        Some(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
    } else {
        None
    };

    for (i, g) in grads.iter().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let p = params.get_mut(crate::params::ParamId::from_index(i)).data_mut();
        for j in 0..g.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let update = match rect {
                Some(r) => {
                    let adaptive = bc2.sqrt() / (v[j].sqrt() + eps);
                    m_hat * r * adaptive
                }
                None => m_hat,
            };
            p[j] -= lr * update;
        }
    }
    Ok(())
}
