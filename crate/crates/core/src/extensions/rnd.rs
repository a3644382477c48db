use serde::{Deserialize, Serialize};

use super::moments::sum_sq_dev;
use super::RunningMoments;
use crate::autodiff::{Tape, Tensor};
use crate::distributed::{Collective, Local};
use crate::env::{ObservationSet, RND};
use crate::error::{Error, Result};
use crate::nn::{Adam, RndPair};

const OBS_CLAMP: f32 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RndConfig {
    pub group: String,
    pub embed_dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// Reward scale η.
    pub reward_scale: f32,
    pub learning_rate: f32,
    pub normalize_reward: bool,
    pub normalize_obs: bool,
}

impl Default for RndConfig {
    fn default() -> Self {
        Self {
            group: RND.to_string(),
            embed_dim: 16,
            hidden_sizes: vec![64, 64],
            reward_scale: 1.0,
            learning_rate: 1e-3,
            normalize_reward: true,
            normalize_obs: true,
        }
    }
}

impl RndConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reward_scale >= 0.0) {
            return Err(Error::Config("rnd reward_scale must be >= 0".into()));
        }
        if self.embed_dim == 0 || self.hidden_sizes.contains(&0) {
            return Err(Error::Config("rnd layer widths must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("rnd learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Normalized network input for the configured group.
fn rnd_input(obs_moments: &RunningMoments, config: &RndConfig, obs: &ObservationSet) -> Result<Tensor> {
    let x = obs.get(&config.group)?;
    if !config.normalize_obs {
        return Ok(x.clone());
    }
    Tensor::new(x.shape().to_vec(), obs_moments.normalize(x.data(), OBS_CLAMP))
}

/// Intrinsic rewards `η ‖f(x̂) - f̄(x̂)‖²`, divided by the running std of
/// intrinsic rewards when reward normalization is on. Pure: no moments are
/// updated.
pub fn rnd_reward(
    pair: &RndPair,
    obs_moments: &RunningMoments,
    reward_moments: &RunningMoments,
    config: &RndConfig,
    obs: &ObservationSet,
) -> Result<Vec<f32>> {
    let x = rnd_input(obs_moments, config, obs)?;
    let scale = if config.normalize_reward {
        1.0 / (reward_moments.std()[0] as f32 + 1e-8)
    } else {
        1.0
    };
    Ok(pair
        .errors(&x)?
        .into_iter()
        .map(|e| config.reward_scale * e * scale)
        .collect())
}

/// One predictor step on `mean ‖f(x̂) - f̄(x̂)‖²`. Returns the loss before the
/// step; an empty batch is a no-op reporting 0.
pub fn rnd_update(
    pair: &mut RndPair,
    optimizer: &mut Adam,
    obs_moments: &RunningMoments,
    config: &RndConfig,
    obs: &ObservationSet,
) -> Result<f32> {
    if obs.batch_size().unwrap_or(0) == 0 {
        return Ok(0.0);
    }
    let (loss, grads) = rnd_loss_grads(pair, obs_moments, config, obs)?;
    optimizer.step(&mut pair.predictor, &grads, config.learning_rate)?;
    Ok(loss)
}

/// Predictor loss and its flat gradient.
pub fn rnd_loss_grads(
    pair: &RndPair,
    obs_moments: &RunningMoments,
    config: &RndConfig,
    obs: &ObservationSet,
) -> Result<(f32, Vec<f32>)> {
    let x = rnd_input(obs_moments, config, obs)?;
    let mut predictor = pair.predictor.clone();
    predictor.zero_grad();
    let mut tape = Tape::new();
    let pv = predictor.register(&mut tape);
    let loss = pair.loss(&mut tape, &pv, &x)?;
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            stat: "rnd_loss".into(),
        });
    }
    predictor.backward(&mut tape, loss, &pv)?;
    Ok((value, predictor.flat_grads()))
}

/// Updates `m` with the union of every rank's `batch`: the global mean first,
/// then the squared deviations around it. A single rank updates directly.
fn synced_update(m: &mut RunningMoments, batch: &[f32], collective: &mut dyn Collective) -> Result<()> {
    let dim = m.dim();
    let world = collective.world_size();
    if world == 1 {
        m.update(batch);
        return Ok(());
    }
    let n = (batch.len() / dim.max(1)) as u64;
    let mut sum = vec![0.0f64; dim];
    for row in batch.chunks_exact(dim.max(1)) {
        for (s, &x) in sum.iter_mut().zip(row) {
            *s += x as f64;
        }
    }
    let mut mean: Vec<f32> = sum.iter().map(|s| (s / n.max(1) as f64) as f32).collect();
    collective.average(&mut mean)?;
    let center: Vec<f64> = mean.iter().map(|&v| v as f64).collect();
    let mut m2: Vec<f32> = sum_sq_dev(batch, &center).into_iter().map(|v| v as f32).collect();
    collective.average(&mut m2)?;
    let m2: Vec<f64> = m2.into_iter().map(|v| v as f64 * world as f64).collect();
    m.merge(n * world as u64, &center, &m2);
    Ok(())
}

/// RND networks together with their normalizers and predictor optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct RndState {
    pub config: RndConfig,
    pub pair: RndPair,
    pub obs_moments: RunningMoments,
    pub reward_moments: RunningMoments,
    pub optimizer: Adam,
}

impl RndState {
    pub fn new(config: RndConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let pair = RndPair::new(input_dim, &config.hidden_sizes, config.embed_dim, seed)?;
        let optimizer = Adam::new(pair.predictor.numel());
        Ok(Self {
            config,
            pair,
            obs_moments: RunningMoments::new(input_dim),
            reward_moments: RunningMoments::new(1),
            optimizer,
        })
    }

    /// Updates the observation normalizer with `obs`, computes raw intrinsic
    /// rewards, folds them into the reward normalizer and returns the
    /// normalized rewards.
    pub fn intrinsic_rewards(&mut self, obs: &ObservationSet) -> Result<Vec<f32>> {
        self.intrinsic_rewards_with(obs, &mut Local)
    }

    /// [`RndState::intrinsic_rewards`] with normalizer statistics merged over
    /// every rank of `collective`, each holding the same number of rows.
    pub fn intrinsic_rewards_with(&mut self, obs: &ObservationSet, collective: &mut dyn Collective) -> Result<Vec<f32>> {
        if self.config.normalize_obs {
            synced_update(&mut self.obs_moments, obs.get(&self.config.group)?.data(), collective)?;
        }
        let mut raw_cfg = self.config.clone();
        raw_cfg.normalize_reward = false;
        let raw = rnd_reward(&self.pair, &self.obs_moments, &self.reward_moments, &raw_cfg, obs)?;
        if !self.config.normalize_reward {
            return Ok(raw);
        }
        synced_update(&mut self.reward_moments, &raw, collective)?;
        let std = self.reward_moments.std()[0] as f32 + 1e-8;
        Ok(raw.into_iter().map(|r| r / std).collect())
    }

    pub fn loss_grads(&self, obs: &ObservationSet) -> Result<(f32, Vec<f32>)> {
        rnd_loss_grads(&self.pair, &self.obs_moments, &self.config, obs)
    }

    pub fn apply(&mut self, grads: &[f32]) -> Result<()> {
        self.optimizer
            .step(&mut self.pair.predictor, grads, self.config.learning_rate)
    }
}
