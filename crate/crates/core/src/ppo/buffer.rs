use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::env::{ObservationRow, ObservationSet};
use crate::error::{Error, Result};

/// Transitions of one rollout, indexed `[t][b]`. Flattened views order rows
/// `t * B + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub obs: Vec<ObservationSet>,
    pub actions: Vec<Tensor>,
    /// Rewards after timeout bootstrapping and any intrinsic bonus.
    pub rewards: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
    pub log_probs: Vec<Vec<f32>>,
    pub terminated: Vec<Vec<bool>>,
    pub timeout: Vec<Vec<bool>>,
    /// `1.0` where the hidden state is zeroed before step `t`.
    pub reset_mask: Vec<Vec<f32>>,
    pub terminal_obs: Vec<BTreeMap<usize, ObservationRow>>,
    /// Observations after the last step.
    pub final_obs: ObservationSet,
    /// `V_T` per environment, zero where the last step terminated.
    pub bootstrap: Vec<f32>,
    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
    /// Detached hidden state at rollout start, before `reset_mask[0]`.
    pub h_start: Option<Tensor>,
}

/// Flat training samples handed to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub obs: ObservationSet,
    pub actions: Tensor,
    pub old_log_prob: Vec<f32>,
    pub old_value: Vec<f32>,
    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.old_log_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_prob.is_empty()
    }
}

impl RolloutBuffer {
    pub fn new(num_envs: usize, h_start: Option<Tensor>) -> Self {
        Self {
            num_envs,
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            values: Vec::new(),
            log_probs: Vec::new(),
            terminated: Vec::new(),
            timeout: Vec::new(),
            reset_mask: Vec::new(),
            terminal_obs: Vec::new(),
            final_obs: ObservationSet::new(),
            bootstrap: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
            h_start,
        }
    }

    pub fn horizon(&self) -> usize {
        self.obs.len()
    }

    pub fn num_samples(&self) -> usize {
        self.horizon() * self.num_envs
    }

    pub fn done(&self, t: usize, b: usize) -> bool {
        self.terminated[t][b] || self.timeout[t][b]
    }

    pub fn has_advantages(&self) -> bool {
        !self.advantages.is_empty() && self.advantages.len() == self.num_samples()
    }

    /// Observation reached by step `t`: the pre-reset row for finished
    /// environments, otherwise the next step's observation.
    pub fn next_obs(&self, t: usize) -> Result<ObservationSet> {
        let mut next = if t + 1 < self.horizon() {
            self.obs[t + 1].clone()
        } else {
            self.final_obs.clone()
        };
        for (&b, row) in &self.terminal_obs[t] {
            for (g, v) in row {
                next.get_mut(g)?.row_mut(b).copy_from_slice(v);
            }
        }
        Ok(next)
    }

    pub fn flat<T: Copy>(rows: &[Vec<T>]) -> Vec<T> {
        rows.iter().flatten().copied().collect()
    }

    pub fn flat_obs(&self) -> Result<ObservationSet> {
        ObservationSet::concat(&self.obs.iter().collect::<Vec<_>>())
    }

    pub fn flat_actions(&self) -> Result<Tensor> {
        let a = self.actions[0].row_width();
        let data: Vec<f32> = self.actions.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::matrix(self.num_samples(), a, data)
    }

    /// Samples at flat rows `rows` with the given (possibly normalized)
    /// advantages.
    pub fn gather(&self, flat_obs: &ObservationSet, flat_actions: &Tensor, advantages: &[f32], rows: &[usize]) -> Result<Minibatch> {
        let values = Self::flat(&self.values);
        let log_probs = Self::flat(&self.log_probs);
        let pick = |v: &[f32]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        Ok(Minibatch {
            obs: flat_obs.select_rows(rows)?,
            actions: flat_actions.select_rows(rows)?,
            old_log_prob: pick(&log_probs),
            old_value: pick(&values),
            advantages: pick(advantages),
            returns: pick(&self.returns),
        })
    }
}

/// Vectorized GAE over `[t][b]` arrays. Returns flat `(advantages, returns)`.
pub fn gae(
    rewards: &[Vec<f32>],
    values: &[Vec<f32>],
    dones: &[Vec<bool>],
    bootstrap: &[f32],
    gamma: f32,
    lambda: f32,
) -> (Vec<f32>, Vec<f32>) {
    let t_len = rewards.len();
    let b_len = bootstrap.len();
    let mut adv = vec![0.0f32; t_len * b_len];
    let mut next_adv = vec![0.0f32; b_len];
    let mut next_value = bootstrap.to_vec();
    for t in (0..t_len).rev() {
        for b in 0..b_len {
            let nd = if dones[t][b] { 0.0 } else { 1.0 };
            let delta = rewards[t][b] + gamma * next_value[b] * nd - values[t][b];
            let a = delta + gamma * lambda * nd * next_adv[b];
            adv[t * b_len + b] = a;
            next_adv[b] = a;
            next_value[b] = values[t][b];
        }
    }
    let ret = adv
        .iter()
        .enumerate()
        .map(|(i, a)| a + values[i / b_len][i % b_len])
        .collect();
    (adv, ret)
}

/// Fills `advantages` and `returns` of a complete rollout.
pub fn compute_gae(buffer: &mut RolloutBuffer, gamma: f32, lambda: f32) -> Result<()> {
    if buffer.horizon() == 0 || buffer.bootstrap.len() != buffer.num_envs {
        return Err(Error::State("rollout is incomplete".into()));
    }
    let dones: Vec<Vec<bool>> = (0..buffer.horizon())
        .map(|t| (0..buffer.num_envs).map(|b| buffer.done(t, b)).collect())
        .collect();
    let (adv, ret) = gae(&buffer.rewards, &buffer.values, &dones, &buffer.bootstrap, gamma, lambda);
    buffer.advantages = adv;
    buffer.returns = ret;
    Ok(())
}
