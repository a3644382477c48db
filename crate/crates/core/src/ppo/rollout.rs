use super::{PpoConfig, RolloutBuffer};
use crate::autodiff::Tensor;
use crate::env::{ObservationSet, VecEnv};
use crate::error::{Error, Result};
use crate::nn::{ActMode, GaussianActorCritic};
use crate::rng::{Domain, Streams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub ret: f32,
    pub length: usize,
    pub success: Option<bool>,
}

/// Everything that carries over between rollouts.
#[derive(Clone, Debug)]
pub struct RolloutState {
    pub streams: Streams,
    /// Global index of local environment 0.
    pub env_offset: usize,
    pub obs: ObservationSet,
    /// Hidden state after the last step, not yet masked.
    pub hidden: Option<Tensor>,
    /// Whether each environment finished on the last step.
    pub reset_flags: Vec<bool>,
    /// Steps taken so far; addresses the action-noise streams.
    pub step: u64,
    pub episode_return: Vec<f32>,
    pub episode_length: Vec<usize>,
    /// Episodes completed since the last drain.
    pub finished: Vec<EpisodeRecord>,
}

impl RolloutState {
    /// Resets `env` with `seed` and starts fresh episode counters.
    pub fn new(env: &mut dyn VecEnv, policy: &GaussianActorCritic, seed: u64, env_offset: usize) -> Self {
        let n = env.spec().num_envs;
        let obs = env.reset_all(seed);
        Self {
            streams: Streams::new(seed),
            env_offset,
            obs,
            hidden: policy.initial_hidden(n),
            reset_flags: vec![false; n],
            step: 0,
            episode_return: vec![0.0; n],
            episode_length: vec![0; n],
            finished: Vec::new(),
        }
    }

    pub fn num_envs(&self) -> usize {
        self.reset_flags.len()
    }

    /// Hidden state entering the next step: rows of environments that just
    /// reset are zeroed.
    pub fn masked_hidden(&self) -> Option<Tensor> {
        self.hidden.as_ref().map(|h| mask_rows(h, &self.reset_flags))
    }

    /// Standard-normal action noise for the current step, one stream per
    /// global environment index.
    pub fn action_noise(&self, action_dim: usize) -> Vec<f32> {
        (0..self.num_envs())
            .flat_map(|b| {
                self.streams
                    .normals(Domain::Action, (self.env_offset + b) as u64, self.step, action_dim)
            })
            .collect()
    }

    pub fn drain_episodes(&mut self) -> Vec<EpisodeRecord> {
        std::mem::take(&mut self.finished)
    }
}

pub(crate) fn mask_rows(h: &Tensor, reset: &[bool]) -> Tensor {
    let mut out = h.clone();
    for (b, &r) in reset.iter().enumerate() {
        if r {
            out.row_mut(b).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Steps `env` for `cfg.rollout_horizon` steps with sampled actions.
///
/// Timeout steps (not terminations) get `γ·V(terminal_obs)` added to their
/// reward when `cfg.bootstrap_timeouts` is set; `V_T` comes from the
/// post-rollout observations and is zeroed where the last step terminated.
pub fn collect_rollout(
    env: &mut dyn VecEnv,
    policy: &GaussianActorCritic,
    cfg: &PpoConfig,
    state: &mut RolloutState,
) -> Result<RolloutBuffer> {
    let n = env.spec().num_envs;
    if state.num_envs() != n || state.obs.batch_size() != Some(n) {
        return Err(Error::Shape(format!(
            "rollout state holds {} environments, env has {n}",
            state.num_envs()
        )));
    }
    let a = env.spec().action_dim;
    if policy.action_dim() != a {
        return Err(Error::Shape(format!(
            "policy emits {} actions, env expects {a}",
            policy.action_dim()
        )));
    }
    let mut buf = RolloutBuffer::new(n, state.hidden.clone());
    for _ in 0..cfg.rollout_horizon {
        let h_in = state.masked_hidden();
        let noise = state.action_noise(a);
        let out = policy.act(&state.obs, h_in.as_ref(), ActMode::Sample, Some(&noise))?;
        let res = env.step(&out.actions)?;
        let mut rewards = res.reward.clone();
        for b in 0..n {
            state.episode_return[b] += res.reward[b];
            state.episode_length[b] += 1;
            if res.done(b) {
                state.finished.push(EpisodeRecord {
                    ret: state.episode_return[b],
                    length: state.episode_length[b],
                    success: env.success(res.terminated[b], state.episode_return[b]),
                });
                state.episode_return[b] = 0.0;
                state.episode_length[b] = 0;
            }
        }
        if cfg.bootstrap_timeouts {
            let timed_out: Vec<usize> = (0..n).filter(|&b| res.timeout[b] && !res.terminated[b]).collect();
            if !timed_out.is_empty() {
                let terminal = res.terminal_set(&timed_out)?;
                let hidden = out.next_hidden.as_ref().map(|h| h.select_rows(&timed_out)).transpose()?;
                let v = policy.values(&terminal, hidden.as_ref())?;
                for (&b, vb) in timed_out.iter().zip(v) {
                    rewards[b] += cfg.gamma * vb;
                }
            }
        }
        buf.obs.push(std::mem::replace(&mut state.obs, res.obs.clone()));
        buf.actions.push(out.actions);
        buf.rewards.push(rewards);
        buf.values.push(out.value);
        buf.log_probs.push(out.log_prob);
        buf.reset_mask
            .push(state.reset_flags.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect());
        state.reset_flags = (0..n).map(|b| res.done(b)).collect();
        buf.terminated.push(res.terminated);
        buf.timeout.push(res.timeout);
        buf.terminal_obs.push(res.terminal_obs);
        state.hidden = out.next_hidden;
        state.step += 1;
    }
    let v_last = policy.values(&state.obs, state.masked_hidden().as_ref())?;
    let last_term = buf.terminated.last().cloned().unwrap_or_else(|| vec![false; n]);
    buf.bootstrap = v_last
        .into_iter()
        .zip(last_term)
        .map(|(v, term)| if term { 0.0 } else { v })
        .collect();
    buf.final_obs = state.obs.clone();
    Ok(buf)
}
