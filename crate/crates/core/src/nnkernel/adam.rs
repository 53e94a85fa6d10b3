use serde::{Deserialize, Serialize};

use super::{Gradients, ParameterSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// AdamW-style decay applied to the weights instead of the gradient.
    #[serde(default)]
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "eps must be positive and weight decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }
}

/// One bias-corrected Adam update of every trainable entry of `params`.
///
/// Gradients are looked up by the parameter set's scope; a trainable entry
/// without a gradient is an error.
pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    let scope = params.scope().to_owned();
    for e in params.iter().filter(|e| e.trainable) {
        let g = grads.param(&scope, &e.name).ok_or_else(|| {
            Error::State(format!("missing gradient for '{scope}/{}'", e.name))
        })?;
        if g.len() != e.value.numel() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient for '{}' has {} values, expected {}", e.name, g.len(), e.value.numel()),
            ));
        }
    }

    let t = params.bump_step() as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for e in params.entries_mut().filter(|e| e.trainable) {
        let g = grads.param(&scope, &e.name).expect("checked above");
        let theta = e.value.data_mut();
        for i in 0..theta.len() {
            let mut gi = g[i];
            if cfg.decoupled {
                theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
            } else {
                gi += cfg.weight_decay * theta[i];
            }
            let m = b1 * e.first_moment[i] + (1.0 - b1) * gi;
            let v = b2 * e.second_moment[i] + (1.0 - b2) * gi * gi;
            e.first_moment[i] = m;
            e.second_moment[i] = v;
            let m_hat = m as f64 / bc1;
            let v_hat = v as f64 / bc2;
            theta[i] -= (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}
