//! Adam with an optional halving learning-rate schedule, used by the
//! point-estimate baseline and the distillation student.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::tensor::Elem;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Halve the base rate every E epochs: rate * 2^(-floor(epoch / E)).
    HalveEvery(u64),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule: LrSchedule::Constant,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam config: {self:?}")));
        }
        Ok(())
    }
}

/// Effective learning rate at a (0-based) epoch.
pub fn lr_at(config: &AdamConfig, epoch: u64) -> f64 {
    match config.schedule {
        LrSchedule::Constant => config.rate,
        LrSchedule::HalveEvery(every) => config.rate * 0.5f64.powi((epoch / every) as i32),
    }
}

/// Parameters plus first/second moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub params: ParamVector,
    m: ParamVector,
    v: ParamVector,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: ParamVector) -> Self {
        let len = params.len();
        AdamState {
            params,
            m: ParamVector::zeros(len),
            v: ParamVector::zeros(len),
            step: 0,
        }
    }
}

/// Standard bias-corrected Adam update at the schedule's rate for `epoch`.
pub fn adam_step(
    state: &mut AdamState,
    grads: &ParamVector,
    config: &AdamConfig,
    epoch: u64,
) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            detail: format!(
                "gradient length {} vs parameters {}",
                grads.len(),
                state.params.len()
            ),
        });
    }
    if !grads.all_finite() {
        return Err(Error::non_finite("adam gradient"));
    }
    state.step += 1;
    let lr = lr_at(config, epoch);
    let (b1, b2) = (config.beta1 as Elem, config.beta2 as Elem);
    let bc1 = 1.0 - (config.beta1 as Elem).powi(state.step as i32);
    let bc2 = 1.0 - (config.beta2 as Elem).powi(state.step as i32);
    let eps = config.epsilon as Elem;
    let lr = lr as Elem;

    let params = state.params.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for ((p, g), (mi, vi)) in params
        .iter_mut()
        .zip(grads.as_slice())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    if !state.params.all_finite() {
        return Err(Error::non_finite("adam parameters"));
    }
    Ok(())
}
