use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LR_MIN: f32 = 1e-5;
pub const LR_MAX: f32 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f32,
    pub lambda: f32,
    pub clip_ratio: f32,
    pub epochs: usize,
    pub num_minibatches: usize,
    pub learning_rate: f32,
    pub kl_target: f32,
    pub value_coef: f32,
    pub entropy_coef: f32,
    pub max_grad_norm: f32,
    pub normalize_advantages: bool,
    pub clip_value_loss: bool,
    pub rollout_horizon: usize,
    /// Folds `γ·V(terminal)` into the reward of timeout steps.
    pub bootstrap_timeouts: bool,
    /// Adapts the learning rate from the mean KL after every epoch.
    pub adaptive_lr: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip_ratio: 0.2,
            epochs: 5,
            num_minibatches: 4,
            learning_rate: 1e-3,
            kl_target: 0.01,
            value_coef: 1.0,
            entropy_coef: 0.01,
            max_grad_norm: 1.0,
            normalize_advantages: true,
            clip_value_loss: true,
            rollout_horizon: 24,
            bootstrap_timeouts: true,
            adaptive_lr: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if !(self.clip_ratio > 0.0) {
            return bad("clip_ratio must be > 0");
        }
        if self.epochs == 0 || self.num_minibatches == 0 {
            return bad("epochs and num_minibatches must be >= 1");
        }
        if !(self.learning_rate >= 0.0) || !(self.kl_target > 0.0) {
            return bad("learning_rate must be >= 0 and kl_target > 0");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be > 0");
        }
        if self.rollout_horizon == 0 {
            return bad("rollout_horizon must be >= 1");
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return bad("value_coef must be >= 0 and entropy_coef finite");
        }
        Ok(())
    }
}

/// KL-adaptive learning-rate rule with a dead zone `[kl/2, 2·kl]`, clamped
/// to `[1e-5, 1e-2]`.
pub fn adapt_lr(mean_kl: f32, lr: f32, cfg: &PpoConfig) -> f32 {
    let next = if mean_kl > 2.0 * cfg.kl_target {
        lr / 1.5
    } else if mean_kl < cfg.kl_target / 2.0 {
        lr * 1.5
    } else {
        lr
    };
    next.clamp(LR_MIN, LR_MAX)
}
