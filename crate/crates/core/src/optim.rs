//! SGD with momentum and coupled weight decay, plus the "poly" schedule.

use crate::error::{config_err, dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum buffers for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct OptState {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

/// One momentum step on a single parameter buffer:
/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, cfg: SgdConfig) -> Result<()> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(config_err!("learning rate must be a non-negative number, got {lr}"));
    }
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(dim_err!(
            "sgd_step: param {}, grad {}, velocity {} lengths differ",
            param.len(),
            grad.len(),
            velocity.len()
        ));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + (g + cfg.weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

impl OptState {
    /// Zero-initialized buffers, one per parameter length.
    pub fn new(config: SgdConfig, param_lens: impl IntoIterator<Item = usize>) -> Self {
        Self {
            config,
            velocity: param_lens.into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocity.is_empty()
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocity[i]
    }

    /// Updates parameter `i` from its gradient.
    pub fn step(&mut self, i: usize, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        let cfg = self.config;
        let v = self
            .velocity
            .get_mut(i)
            .ok_or_else(|| dim_err!("no momentum buffer for parameter {i}"))?;
        sgd_step(param, grad, v, lr, cfg)
    }
}

/// `base_lr · (1 − iter/max_iter)^power`; iterations past the end clamp to 0.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    let max_iter = max_iter.max(1);
    if iter > max_iter {
        log::warn!("poly_lr: iteration {iter} beyond schedule end {max_iter}; using 0");
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}
