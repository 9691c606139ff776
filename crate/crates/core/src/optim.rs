//! Plain stochastic gradient descent with step decay and L2 weight decay.

use crate::nn::Parameters;
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Multiplier applied every `decay_interval` steps.
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub weight_decay: f64,
    pub total_steps: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay_factor: 0.1,
            decay_interval: 5_000,
            weight_decay: 5e-4,
            total_steps: 10_000,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TensorError::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(TensorError::InvalidConfig(format!(
                "decay factor {} must lie in (0, 1]",
                self.decay_factor
            )));
        }
        if self.decay_interval == 0 {
            return Err(TensorError::InvalidConfig("decay interval must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TensorError::InvalidConfig(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// `initial · decay^floor(step / interval)`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let k = (step / self.decay_interval) as i32;
        self.learning_rate * self.decay_factor.powi(k)
    }
}

/// One update `θ ← θ − lr(step)·(grad + wd·θ)`, then clears every gradient.
///
/// Weight decay only applies to parameters flagged for it. Fails before
/// touching any value if a gradient is missing.
pub fn sgd_step(params: &mut Parameters, cfg: &SgdConfig, step: usize) -> Result<()> {
    cfg.validate()?;
    if let Some(p) = params.iter().find(|p| !p.value.has_grad()) {
        return Err(TensorError::MissingGradient(p.name.clone()));
    }
    let lr = cfg.learning_rate_at(step);
    for p in params.iter_mut() {
        let decay = if p.weight_decay { cfg.weight_decay } else { 0.0 };
        let grad = p.value.take_grad().expect("checked above");
        for (theta, g) in p.value.data_mut().iter_mut().zip(&grad) {
            *theta -= lr * (g + decay * *theta);
        }
    }
    Ok(())
}
