use std::f32::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::obs::{CRITIC, EXPERT, POLICY, RND};
use super::Task;

/// Double integrator: `v' = v + dt·u`, `p' = p + dt·v'`, with stage reward
/// `-(p² + 0.1·v² + 0.01·u²)` on the pre-transition state.
pub fn point_mass_step(state: (f32, f32), u: f32, dt: f32) -> ((f32, f32), f32) {
    let (p, v) = state;
    let reward = -(p * p + 0.1 * v * v + 0.01 * u * u);
    let v1 = v + dt * u;
    let p1 = p + dt * v1;
    ((p1, v1), reward)
}

/// Wraps into `(-π, π]`, exactly odd in its argument.
fn wrap_angle(x: f32) -> f32 {
    let two_pi = 2.0 * PI;
    let mut r = x.abs() % two_pi;
    if r > PI {
        r -= two_pi;
    }
    let w = if x < 0.0 { -r } else { r };
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Pendulum with `θ = 0` upright, integrated by semi-implicit Euler.
pub fn pendulum_step(state: (f32, f32), u: f32, dt: f32) -> ((f32, f32), f32) {
    const G: f32 = 10.0;
    const M: f32 = 1.0;
    const L: f32 = 1.0;
    let (th, thdot) = state;
    let w = wrap_angle(th);
    let reward = -(w * w + 0.1 * thdot * thdot + 0.001 * u * u);
    let acc = (3.0 * G / (2.0 * L)) * th.sin() + (3.0 / (M * L * L)) * u;
    let thdot1 = (thdot + dt * acc).clamp(-8.0, 8.0);
    let th1 = th + dt * thdot1;
    ((th1, thdot1), reward)
}

/// One step along the sparse-reward chain; returns `(p', reward, terminated)`.
pub fn sparse_chain_step(p: f32, a: f32) -> (f32, f32, bool) {
    let p1 = (p + 0.1 * a).clamp(0.0, 10.0);
    if p1 >= 9.5 {
        (p1, 1.0, true)
    } else {
        (p1, 0.0, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryState {
    pub cue: f32,
    pub t: usize,
}

/// Returns `(next, reward, terminated)`. At `t == query_step` the episode
/// ends and pays 1 when the action's sign matches the cue.
pub fn memory_recall_step(state: MemoryState, a: f32, query_step: usize) -> (MemoryState, f32, bool) {
    if state.t >= query_step {
        let reward = if a * state.cue > 0.0 { 1.0 } else { 0.0 };
        (state, reward, true)
    } else {
        (
            MemoryState {
                cue: state.cue,
                t: state.t + 1,
            },
            0.0,
            false,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointMass {
    pub dt: f32,
    pub max_steps: usize,
    /// Standard deviation of noise on the `policy` group. When positive the
    /// exact state is exposed as the privileged `expert` group.
    pub obs_noise: f32,
}

impl Default for PointMass {
    fn default() -> Self {
        Self {
            dt: 0.05,
            max_steps: 200,
            obs_noise: 0.0,
        }
    }
}

impl Task for PointMass {
    type State = (f32, f32);

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (Vec<f32>, Vec<f32>) {
        (vec![-10.0], vec![10.0])
    }

    fn max_episode_length(&self) -> usize {
        self.max_steps
    }

    fn schema(&self) -> Vec<(String, usize)> {
        let mut s = vec![(CRITIC.to_string(), 2)];
        if self.obs_noise > 0.0 {
            s.push((EXPERT.to_string(), 2));
        }
        s.push((POLICY.to_string(), 2));
        s
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Self::State {
        (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0))
    }

    fn transition(&self, s: &Self::State, action: &[f32]) -> (Self::State, f32, bool) {
        let (next, r) = point_mass_step(*s, action[0], self.dt);
        (next, r, false)
    }

    fn observe(&self, s: &Self::State, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        let exact = vec![s.0, s.1];
        if self.obs_noise > 0.0 {
            let noisy = exact
                .iter()
                .map(|&x| {
                    let e: f32 = StandardNormal.sample(rng);
                    x + self.obs_noise * e
                })
                .collect();
            vec![exact.clone(), exact, noisy]
        } else {
            vec![exact.clone(), exact]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pendulum {
    pub dt: f32,
    pub max_steps: usize,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            dt: 0.05,
            max_steps: 200,
        }
    }
}

impl Task for Pendulum {
    type State = (f32, f32);

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (Vec<f32>, Vec<f32>) {
        (vec![-2.0], vec![2.0])
    }

    fn max_episode_length(&self) -> usize {
        self.max_steps
    }

    fn schema(&self) -> Vec<(String, usize)> {
        vec![(POLICY.to_string(), 3)]
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Self::State {
        // θ uniform in (-π, π].
        let th = PI - rng.random_range(0.0..2.0 * PI);
        (th, rng.random_range(-1.0..=1.0))
    }

    fn transition(&self, s: &Self::State, action: &[f32]) -> (Self::State, f32, bool) {
        let (next, r) = pendulum_step(*s, action[0], self.dt);
        (next, r, false)
    }

    fn observe(&self, s: &Self::State, _rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        vec![vec![s.0.cos(), s.0.sin(), s.1]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseChain {
    pub max_steps: usize,
}

impl Default for SparseChain {
    fn default() -> Self {
        Self { max_steps: 256 }
    }
}

impl Task for SparseChain {
    type State = f32;

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (Vec<f32>, Vec<f32>) {
        (vec![-1.0], vec![1.0])
    }

    fn max_episode_length(&self) -> usize {
        self.max_steps
    }

    fn schema(&self) -> Vec<(String, usize)> {
        vec![(POLICY.to_string(), 1), (RND.to_string(), 1)]
    }

    fn initial_state(&self, _rng: &mut ChaCha8Rng) -> Self::State {
        0.0
    }

    fn transition(&self, s: &Self::State, action: &[f32]) -> (Self::State, f32, bool) {
        sparse_chain_step(*s, action[0])
    }

    fn observe(&self, s: &Self::State, _rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        vec![vec![s / 10.0], vec![s / 10.0]]
    }

    fn success(&self, terminated: bool, _episode_return: f32) -> Option<bool> {
        Some(terminated)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryRecall {
    pub query_step: usize,
    pub max_steps: usize,
}

impl Default for MemoryRecall {
    fn default() -> Self {
        Self {
            query_step: 12,
            max_steps: 13,
        }
    }
}

impl Task for MemoryRecall {
    type State = MemoryState;

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (Vec<f32>, Vec<f32>) {
        (vec![-1.0], vec![1.0])
    }

    fn max_episode_length(&self) -> usize {
        self.max_steps
    }

    fn schema(&self) -> Vec<(String, usize)> {
        vec![(POLICY.to_string(), 3)]
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Self::State {
        MemoryState {
            cue: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            t: 0,
        }
    }

    fn transition(&self, s: &Self::State, action: &[f32]) -> (Self::State, f32, bool) {
        memory_recall_step(*s, action[0], self.query_step)
    }

    fn observe(&self, s: &Self::State, _rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        let cue = if s.t == 0 { s.cue } else { 0.0 };
        let query = if s.t == self.query_step { 1.0 } else { 0.0 };
        vec![vec![cue, query, s.t as f32 / self.query_step as f32]]
    }

    fn success(&self, _terminated: bool, episode_return: f32) -> Option<bool> {
        Some(episode_return > 0.5)
    }
}

/// Pays a constant reward forever; episodes end only by timeout.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantReward {
    pub reward: f32,
    pub max_steps: usize,
}

impl Default for ConstantReward {
    fn default() -> Self {
        Self {
            reward: 1.0,
            max_steps: 50,
        }
    }
}

impl Task for ConstantReward {
    type State = ();

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (Vec<f32>, Vec<f32>) {
        (vec![-1.0], vec![1.0])
    }

    fn max_episode_length(&self) -> usize {
        self.max_steps
    }

    fn schema(&self) -> Vec<(String, usize)> {
        vec![(POLICY.to_string(), 1)]
    }

    fn initial_state(&self, _rng: &mut ChaCha8Rng) -> Self::State {}

    fn transition(&self, _s: &Self::State, _action: &[f32]) -> (Self::State, f32, bool) {
        ((), self.reward, false)
    }

    fn observe(&self, _s: &Self::State, _rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        vec![vec![1.0]]
    }
}
