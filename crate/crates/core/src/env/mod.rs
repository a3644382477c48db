//! Vectorized environment contract and the built-in analytical tasks.
//!
//! Environments use same-step reset: when an environment finishes inside
//! [`VecEnv::step`], it is reset within the same call, the returned
//! observation row is the new episode's first observation, and the final
//! pre-reset observation travels separately in [`StepResult::terminal_obs`].

mod lqr;
mod obs;
mod tasks;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use lqr::{lqr_expected_value, lqr_oracle, solve_riccati, LqrOracle, LqrSolution, LqrWeights};
pub use obs::{ObservationSet, CRITIC, EXPERT, POLICY, RND};
pub use tasks::{
    memory_recall_step, pendulum_step, point_mass_step, sparse_chain_step, ConstantReward,
    MemoryRecall, MemoryState, Pendulum, PointMass, SparseChain,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{Domain, Streams};

/// Static description of a batch of environments.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub num_envs: usize,
    pub action_dim: usize,
    pub action_low: Vec<f32>,
    pub action_high: Vec<f32>,
    pub max_episode_length: usize,
    /// `(group, width)` in name order.
    pub schema: Vec<(String, usize)>,
}

/// One finished environment's pre-reset observation, per group.
pub type ObservationRow = BTreeMap<String, Vec<f32>>;

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Observations after the step, post-reset for finished environments.
    pub obs: ObservationSet,
    pub reward: Vec<f32>,
    pub terminated: Vec<bool>,
    pub timeout: Vec<bool>,
    /// Pre-reset observations of exactly the environments that finished.
    pub terminal_obs: BTreeMap<usize, ObservationRow>,
}

impl StepResult {
    pub fn done(&self, b: usize) -> bool {
        self.terminated[b] || self.timeout[b]
    }

    /// Terminal rows of the given environments gathered into one set.
    pub fn terminal_set(&self, envs: &[usize]) -> Result<ObservationSet> {
        let mut set = ObservationSet::new();
        let Some(first) = envs.first() else {
            return Ok(set);
        };
        let row0 = self
            .terminal_obs
            .get(first)
            .ok_or_else(|| Error::State(format!("env {first} has no terminal observation")))?;
        for (name, v) in row0 {
            let mut data = Vec::with_capacity(envs.len() * v.len());
            for b in envs {
                let row = self.terminal_obs.get(b).ok_or_else(|| {
                    Error::State(format!("env {b} has no terminal observation"))
                })?;
                data.extend_from_slice(&row[name]);
            }
            set.insert(name.clone(), Tensor::matrix(envs.len(), v.len(), data)?)?;
        }
        Ok(set)
    }
}

/// Batched environment under the same-step reset convention.
pub trait VecEnv: Send {
    fn spec(&self) -> &EnvSpec;

    /// Resets every environment. Deterministic given `seed`.
    fn reset_all(&mut self, seed: u64) -> ObservationSet;

    /// Advances every environment by one step with `actions` (`B × A`).
    fn step(&mut self, actions: &Tensor) -> Result<StepResult>;

    /// Whether an episode that ended this way counts as a success, for
    /// tasks that define one.
    fn success(&self, _terminated: bool, _episode_return: f32) -> Option<bool> {
        None
    }
}

/// Single-environment dynamics plugged into [`BatchedEnv`].
pub trait Task: Send + Sync {
    type State: Clone + Send + Sync + std::fmt::Debug;

    fn action_dim(&self) -> usize;
    fn action_bounds(&self) -> (Vec<f32>, Vec<f32>);
    fn max_episode_length(&self) -> usize;
    /// `(group, width)` in name order.
    fn schema(&self) -> Vec<(String, usize)>;
    fn initial_state(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Self::State;
    /// Applies an already-clipped action; returns `(next, reward, terminated)`.
    fn transition(&self, state: &Self::State, action: &[f32]) -> (Self::State, f32, bool);
    /// One row per schema group, in schema order.
    fn observe(&self, state: &Self::State, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<f32>>;

    fn success(&self, _terminated: bool, _episode_return: f32) -> Option<bool> {
        None
    }
}

/// Runs `B` copies of a [`Task`]; environment `b` owns the random streams of
/// global index `env_offset + b`.
#[derive(Debug)]
pub struct BatchedEnv<T: Task> {
    task: T,
    spec: EnvSpec,
    env_offset: usize,
    random_init_counters: bool,
    streams: Streams,
    states: Vec<T::State>,
    elapsed: Vec<usize>,
    episodes: Vec<u64>,
    observations: Vec<u64>,
}

impl<T: Task> BatchedEnv<T> {
    pub fn new(task: T, num_envs: usize, env_offset: usize, random_init_counters: bool) -> Result<Self> {
        if num_envs == 0 {
            return Err(Error::Config("num_envs must be >= 1".into()));
        }
        let (lo, hi) = task.action_bounds();
        if task.max_episode_length() == 0 || lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("invalid episode length or action bounds".into()));
        }
        let spec = EnvSpec {
            num_envs,
            action_dim: task.action_dim(),
            action_low: lo,
            action_high: hi,
            max_episode_length: task.max_episode_length(),
            schema: task.schema(),
        };
        let mut env = Self {
            task,
            spec,
            env_offset,
            random_init_counters,
            streams: Streams::new(0),
            states: Vec::new(),
            elapsed: vec![0; num_envs],
            episodes: vec![0; num_envs],
            observations: vec![0; num_envs],
        };
        env.reset_all(0);
        Ok(env)
    }

    pub fn task(&self) -> &T {
        &self.task
    }

    pub fn states(&self) -> &[T::State] {
        &self.states
    }

    pub fn elapsed(&self) -> &[usize] {
        &self.elapsed
    }

    fn global(&self, b: usize) -> u64 {
        (self.env_offset + b) as u64
    }

    fn fresh_state(&mut self, b: usize) -> T::State {
        let mut rng = self
            .streams
            .rng(Domain::EnvInit, self.global(b), self.episodes[b]);
        self.episodes[b] += 1;
        self.task.initial_state(&mut rng)
    }

    fn observe(&mut self, b: usize, state: &T::State) -> Vec<Vec<f32>> {
        let mut rng = self
            .streams
            .rng(Domain::EnvNoise, self.global(b), self.observations[b]);
        self.observations[b] += 1;
        self.task.observe(state, &mut rng)
    }

    fn assemble(&self, rows: Vec<Vec<Vec<f32>>>) -> ObservationSet {
        let mut set = ObservationSet::new();
        for (g, (name, width)) in self.spec.schema.iter().enumerate() {
            let mut data = Vec::with_capacity(rows.len() * width);
            for r in &rows {
                data.extend_from_slice(&r[g]);
            }
            set.insert(
                name.clone(),
                Tensor::matrix(rows.len(), *width, data).expect("task rows match schema"),
            )
            .expect("uniform batch");
        }
        set
    }
}

impl<T: Task> VecEnv for BatchedEnv<T> {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset_all(&mut self, seed: u64) -> ObservationSet {
        self.streams = Streams::new(seed);
        let n = self.spec.num_envs;
        self.episodes = vec![0; n];
        self.observations = vec![0; n];
        self.states = (0..n).map(|b| self.fresh_state(b)).collect();
        let t_max = self.spec.max_episode_length;
        self.elapsed = (0..n)
            .map(|b| {
                if self.random_init_counters {
                    self.streams
                        .rng(Domain::EnvCounter, self.global(b), 0)
                        .random_range(0..t_max)
                } else {
                    0
                }
            })
            .collect();
        let rows = (0..n)
            .map(|b| {
                let s = self.states[b].clone();
                self.observe(b, &s)
            })
            .collect();
        self.assemble(rows)
    }

    fn step(&mut self, actions: &Tensor) -> Result<StepResult> {
        let (n, a) = (self.spec.num_envs, self.spec.action_dim);
        if actions.shape() != [n, a] {
            return Err(Error::Shape(format!(
                "actions {:?}, expected [{n}, {a}]",
                actions.shape()
            )));
        }
        for b in 0..n {
            if actions.row(b).iter().any(|v| !v.is_finite()) {
                return Err(Error::EnvFault {
                    env: b,
                    reason: "non-finite action".into(),
                });
            }
        }
        let mut reward = vec![0.0; n];
        let mut terminated = vec![false; n];
        let mut timeout = vec![false; n];
        let mut terminal_obs = BTreeMap::new();
        let mut rows = Vec::with_capacity(n);
        for b in 0..n {
            let clipped: Vec<f32> = actions
                .row(b)
                .iter()
                .zip(self.spec.action_low.iter().zip(&self.spec.action_high))
                .map(|(&u, (&lo, &hi))| u.clamp(lo, hi))
                .collect();
            let (next, r, term) = self.task.transition(&self.states[b], &clipped);
            self.elapsed[b] += 1;
            reward[b] = r;
            terminated[b] = term;
            timeout[b] = !term && self.elapsed[b] >= self.spec.max_episode_length;
            if term || timeout[b] {
                let last = self.observe(b, &next);
                let row: ObservationRow = self
                    .spec
                    .schema
                    .iter()
                    .map(|(g, _)| g.clone())
                    .zip(last)
                    .collect();
                terminal_obs.insert(b, row);
                let fresh = self.fresh_state(b);
                self.elapsed[b] = 0;
                rows.push(self.observe(b, &fresh));
                self.states[b] = fresh;
            } else {
                rows.push(self.observe(b, &next));
                self.states[b] = next;
            }
        }
        Ok(StepResult {
            obs: self.assemble(rows),
            reward,
            terminated,
            timeout,
            terminal_obs,
        })
    }

    fn success(&self, terminated: bool, episode_return: f32) -> Option<bool> {
        self.task.success(terminated, episode_return)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    PointMass,
    Pendulum,
    SparseChain,
    MemoryRecall,
    ConstantReward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvOverrides {
    pub max_episode_length: Option<usize>,
    /// Desynchronizes first timeouts by pre-aging episode counters.
    pub random_init_counters: bool,
    /// Gaussian noise on the point-mass `policy` group; enables the
    /// privileged `expert` group.
    pub obs_noise: f32,
    /// Per-step reward of `constant_reward`.
    pub constant_reward: f32,
}

impl Default for EnvOverrides {
    fn default() -> Self {
        Self {
            max_episode_length: None,
            random_init_counters: true,
            obs_noise: 0.0,
            constant_reward: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    pub num_envs: usize,
    #[serde(default)]
    pub overrides: EnvOverrides,
}

impl EnvConfig {
    pub fn new(name: EnvName, num_envs: usize) -> Self {
        Self {
            name,
            num_envs,
            overrides: EnvOverrides::default(),
        }
    }
}

/// Builds `num_envs` environments whose streams start at global index
/// `env_offset`.
pub fn make_env(cfg: &EnvConfig, num_envs: usize, env_offset: usize) -> Result<Box<dyn VecEnv>> {
    let o = &cfg.overrides;
    let rc = o.random_init_counters;
    if o.max_episode_length == Some(0) {
        return Err(Error::Config("max_episode_length must be >= 1".into()));
    }
    if !(o.obs_noise >= 0.0) {
        return Err(Error::Config("obs_noise must be >= 0".into()));
    }
    Ok(match cfg.name {
        EnvName::PointMass => {
            let mut t = PointMass::default();
            t.obs_noise = o.obs_noise;
            if let Some(m) = o.max_episode_length {
                t.max_steps = m;
            }
            Box::new(BatchedEnv::new(t, num_envs, env_offset, rc)?)
        }
        EnvName::Pendulum => {
            let mut t = Pendulum::default();
            if let Some(m) = o.max_episode_length {
                t.max_steps = m;
            }
            Box::new(BatchedEnv::new(t, num_envs, env_offset, rc)?)
        }
        EnvName::SparseChain => {
            let mut t = SparseChain::default();
            if let Some(m) = o.max_episode_length {
                t.max_steps = m;
            }
            Box::new(BatchedEnv::new(t, num_envs, env_offset, rc)?)
        }
        EnvName::MemoryRecall => {
            let mut t = MemoryRecall::default();
            if let Some(m) = o.max_episode_length {
                t.max_steps = m;
            }
            Box::new(BatchedEnv::new(t, num_envs, env_offset, rc)?)
        }
        EnvName::ConstantReward => {
            let mut t = ConstantReward::default();
            t.reward = o.constant_reward;
            if let Some(m) = o.max_episode_length {
                t.max_steps = m;
            }
            Box::new(BatchedEnv::new(t, num_envs, env_offset, rc)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(n: usize, a: usize) -> Tensor {
        Tensor::zeros(vec![n, a]).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let mut e1 = BatchedEnv::new(Pendulum::default(), 8, 0, true).unwrap();
        let mut e2 = BatchedEnv::new(Pendulum::default(), 8, 0, true).unwrap();
        assert_eq!(e1.reset_all(5), e2.reset_all(5));
        assert_eq!(e1.elapsed(), e2.elapsed());
        let o3 = e2.reset_all(6);
        assert_ne!(e1.reset_all(5), o3);
    }

    #[test]
    fn disabled_pre_aging_starts_at_zero() {
        let mut e = BatchedEnv::new(Pendulum::default(), 16, 0, false).unwrap();
        e.reset_all(3);
        assert!(e.elapsed().iter().all(|&c| c == 0));
    }

    #[test]
    fn timeout_fires_on_fifth_step_with_same_step_reset() {
        let task = PointMass {
            max_steps: 5,
            ..PointMass::default()
        };
        let mut e = BatchedEnv::new(task, 1, 0, false).unwrap();
        e.reset_all(1);
        for _ in 0..4 {
            let r = e.step(&zeros(1, 1)).unwrap();
            assert!(!r.timeout[0] && !r.terminated[0]);
            assert!(r.terminal_obs.is_empty());
        }
        let before = e.states()[0];
        let r = e.step(&zeros(1, 1)).unwrap();
        assert!(r.timeout[0] && !r.terminated[0]);
        // Terminal row is the advanced pre-reset state; obs is a fresh start.
        let (next, _) = point_mass_step(before, 0.0, 0.05);
        assert_eq!(r.terminal_obs[&0][POLICY], vec![next.0, next.1]);
        let fresh = e.states()[0];
        assert_eq!(r.obs.get(POLICY).unwrap().data(), &[fresh.0, fresh.1]);
        assert_eq!(e.elapsed()[0], 0);
    }

    #[test]
    fn nan_action_faults_with_index() {
        let mut e = BatchedEnv::new(PointMass::default(), 3, 0, false).unwrap();
        let mut a = zeros(3, 1);
        a.data_mut()[2] = f32::NAN;
        assert!(matches!(e.step(&a), Err(Error::EnvFault { env: 2, .. })));
    }

    #[test]
    fn first_timeouts_are_spread_out() {
        let mut e = BatchedEnv::new(Pendulum::default(), 1024, 0, true).unwrap();
        e.reset_all(0);
        let mut first = vec![None; 1024];
        for t in 1..=200 {
            let r = e.step(&zeros(1024, 1)).unwrap();
            for b in 0..1024 {
                if r.timeout[b] && first[b].is_none() {
                    first[b] = Some(t);
                }
            }
        }
        let mut distinct: Vec<usize> = first.iter().map(|f| f.unwrap()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert!(distinct.len() >= 150, "{}", distinct.len());
    }

    #[test]
    fn batched_equals_scalar_simulation() {
        let task = PointMass {
            obs_noise: 0.05,
            ..PointMass::default()
        };
        let mut batch = BatchedEnv::new(task.clone(), 4, 10, true).unwrap();
        let mut singles: Vec<_> = (0..4)
            .map(|b| BatchedEnv::new(task.clone(), 1, 10 + b, true).unwrap())
            .collect();
        let ob = batch.reset_all(9);
        for (b, s) in singles.iter_mut().enumerate() {
            let os = s.reset_all(9);
            for (g, t) in os.iter() {
                assert_eq!(ob.get(g).unwrap().row(b), t.data());
            }
        }
        for step in 0..300 {
            let acts: Vec<f32> = (0..4).map(|b| ((step * 7 + b) as f32 * 0.3).sin() * 12.0).collect();
            let rb = batch.step(&Tensor::matrix(4, 1, acts.clone()).unwrap()).unwrap();
            for (b, s) in singles.iter_mut().enumerate() {
                let rs = s.step(&Tensor::matrix(1, 1, vec![acts[b]]).unwrap()).unwrap();
                assert_eq!(rb.reward[b].to_bits(), rs.reward[0].to_bits());
                assert_eq!(rb.timeout[b], rs.timeout[0]);
                for (g, t) in rs.obs.iter() {
                    assert_eq!(rb.obs.get(g).unwrap().row(b), t.data());
                }
            }
        }
    }

    #[test]
    fn make_env_builds_each_task() {
        for name in [
            EnvName::PointMass,
            EnvName::Pendulum,
            EnvName::SparseChain,
            EnvName::MemoryRecall,
            EnvName::ConstantReward,
        ] {
            let mut env = make_env(&EnvConfig::new(name, 3), 3, 0).unwrap();
            let obs = env.reset_all(0);
            assert_eq!(obs.batch_size(), Some(3));
            assert!(obs.contains(POLICY));
            assert_eq!(obs.schema(), env.spec().schema);
        }
    }
}
