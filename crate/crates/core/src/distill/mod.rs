//! DAgger-style distillation: roll out the student, relabel every visited
//! observation with the expert's action, and regress the student onto the
//! labels.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::env::{lqr_oracle, LqrOracle, LqrWeights, ObservationSet, VecEnv, EXPERT, POLICY};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, ActMode, Adam, GaussianActorCritic, Heads};
use crate::ppo::{env_groups, stratified_minibatches, EpisodeRecord, RolloutState, UpdateContext};
use crate::rng::Domain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MseOnMean,
    Nll,
}

/// Where expert actions come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertSource {
    /// Analytic point-mass LQR controller.
    Lqr,
    /// Frozen feedforward policy checkpoint queried in mean mode.
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Overrides the run's `max_iterations` when set.
    pub iterations: Option<usize>,
    pub rollout_horizon: usize,
    pub learning_rate: f32,
    pub epochs_per_iteration: usize,
    pub minibatches: usize,
    pub loss_kind: LossKind,
    /// Probability that the expert's action is executed at a step.
    pub beta: f32,
    /// Multiplies `beta` after every iteration.
    pub beta_decay: f32,
    pub max_grad_norm: f32,
    /// Execute the student's mean action instead of a sample.
    pub student_deterministic: bool,
    pub expert: ExpertSource,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: None,
            rollout_horizon: 24,
            learning_rate: 1e-3,
            epochs_per_iteration: 4,
            minibatches: 4,
            loss_kind: LossKind::MseOnMean,
            beta: 0.0,
            beta_decay: 1.0,
            max_grad_norm: 1.0,
            student_deterministic: false,
            expert: ExpertSource::Lqr,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.beta) || !(0.0..=1.0).contains(&self.beta_decay) {
            return bad("beta and beta_decay must be in [0, 1]");
        }
        if self.rollout_horizon == 0 || self.epochs_per_iteration == 0 || self.minibatches == 0 {
            return bad("rollout_horizon, epochs_per_iteration and minibatches must be >= 1");
        }
        if !(self.learning_rate >= 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate must be >= 0 and max_grad_norm > 0");
        }
        Ok(())
    }

    /// Mixing coefficient used at `iteration`.
    pub fn beta_at(&self, iteration: u64) -> f32 {
        self.beta * self.beta_decay.powi(iteration.min(i32::MAX as u64) as i32)
    }
}

/// Deterministic action oracle.
pub trait Expert {
    fn act(&self, obs: &ObservationSet) -> Result<Tensor>;
}

/// `u = clip(-K x)` on the point mass. Reads the privileged `expert` group
/// when present, otherwise `policy`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrExpert {
    pub oracle: LqrOracle,
}

impl LqrExpert {
    pub fn point_mass() -> Result<Self> {
        Ok(Self {
            oracle: lqr_oracle(0.05, LqrWeights::default(), 200, 0.99, 0, 0)?,
        })
    }
}

impl Expert for LqrExpert {
    fn act(&self, obs: &ObservationSet) -> Result<Tensor> {
        let x = if obs.contains(EXPERT) {
            obs.get(EXPERT)?
        } else {
            obs.get(POLICY)?
        };
        if x.row_width() != 2 {
            return Err(Error::Shape(format!("LQR expert expects (p, v), got width {}", x.row_width())));
        }
        let u = (0..x.rows()).map(|r| self.oracle.action(x.row(r)[0], x.row(r)[1])).collect();
        Tensor::matrix(x.rows(), 1, u)
    }
}

/// Frozen feedforward policy acting with its mean.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyExpert {
    pub policy: GaussianActorCritic,
}

impl PolicyExpert {
    pub fn new(policy: GaussianActorCritic) -> Result<Self> {
        if policy.is_recurrent() {
            return Err(Error::Config("expert policies must be feedforward".into()));
        }
        Ok(Self { policy })
    }
}

impl Expert for PolicyExpert {
    fn act(&self, obs: &ObservationSet) -> Result<Tensor> {
        Ok(self.policy.act(obs, None, ActMode::Mean, None)?.mean)
    }
}

/// Relabeled data of one iteration, indexed `[t]` with `B` rows each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub obs: Vec<ObservationSet>,
    pub expert_actions: Vec<Tensor>,
    pub executed_actions: Vec<Tensor>,
    pub reset_mask: Vec<Vec<f32>>,
    pub h_start: Option<Tensor>,
    pub num_envs: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.obs.len() * self.num_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_obs(&self) -> Result<ObservationSet> {
        ObservationSet::concat(&self.obs.iter().collect::<Vec<_>>())
    }

    pub fn flat_targets(&self) -> Result<Tensor> {
        let a = self.expert_actions[0].row_width();
        let data = self.expert_actions.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::matrix(self.len(), a, data)
    }
}

/// Executes `horizon` steps where each environment applies the expert's
/// action with probability `beta` and the student's otherwise; stores the
/// expert's action for every visited observation.
pub fn collect_and_relabel(
    env: &mut dyn VecEnv,
    student: &GaussianActorCritic,
    expert: &dyn Expert,
    horizon: usize,
    beta: f32,
    student_mode: ActMode,
    state: &mut RolloutState,
) -> Result<Dataset> {
    let n = env.spec().num_envs;
    let a = env.spec().action_dim;
    let mut data = Dataset {
        obs: Vec::with_capacity(horizon),
        expert_actions: Vec::with_capacity(horizon),
        executed_actions: Vec::with_capacity(horizon),
        reset_mask: Vec::with_capacity(horizon),
        h_start: state.hidden.clone(),
        num_envs: n,
    };
    for _ in 0..horizon {
        let h_in = state.masked_hidden();
        let noise = state.action_noise(a);
        let out = student.act(&state.obs, h_in.as_ref(), student_mode, Some(&noise))?;
        let target = expert.act(&state.obs)?;
        if target.shape() != out.actions.shape() {
            return Err(Error::Shape(format!(
                "expert actions {:?}, student actions {:?}",
                target.shape(),
                out.actions.shape()
            )));
        }
        let mut executed = out.actions.clone();
        if beta > 0.0 {
            for b in 0..n {
                let u: f32 = state
                    .streams
                    .rng(Domain::Mixing, (state.env_offset + b) as u64, state.step)
                    .random();
                if u < beta {
                    executed.row_mut(b).copy_from_slice(target.row(b));
                }
            }
        }
        let res = env.step(&executed)?;
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
        data.reset_mask
            .push(state.reset_flags.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect());
        state.reset_flags = (0..n).map(|b| res.done(b)).collect();
        data.obs.push(std::mem::replace(&mut state.obs, res.obs));
        data.expert_actions.push(target);
        data.executed_actions.push(executed);
        state.hidden = out.next_hidden;
        state.step += 1;
    }
    Ok(data)
}

/// Imitation loss on heads whose rows align with `targets`.
fn imitation_loss(
    tape: &mut Tape,
    vars: &[Var],
    student: &GaussianActorCritic,
    heads: &Heads,
    targets: &Tensor,
    kind: LossKind,
) -> Result<Var> {
    let t = tape.constant(targets.clone());
    match kind {
        LossKind::MseOnMean => {
            let d = tape.sub(heads.mean, t)?;
            let d2 = tape.square(d)?;
            let per = tape.sum_axes(d2, &[1])?;
            tape.mean(per)
        }
        LossKind::Nll => {
            let lp = student.log_prob(tape, vars, heads.mean, t)?;
            let m = tape.mean(lp)?;
            tape.neg(m)
        }
    }
}

/// Eager imitation loss of `student` on `(obs, targets)`.
pub fn distill_loss(
    student: &GaussianActorCritic,
    obs: &ObservationSet,
    targets: &Tensor,
    kind: LossKind,
) -> Result<f32> {
    let mut tape = Tape::new();
    let vars = student.params.register_const(&mut tape);
    let hidden = student
        .initial_hidden(targets.rows())
        .map(|h| tape.constant(h));
    let heads = student.forward(&mut tape, &vars, obs, hidden)?;
    let l = imitation_loss(&mut tape, &vars, student, &heads, targets, kind)?;
    Ok(tape.scalar_value(l))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistillStats {
    pub loss: f32,
    pub minibatches: usize,
}

/// Minibatched regression of the student onto the dataset's expert actions.
pub fn distill_update(
    data: &Dataset,
    student: &mut GaussianActorCritic,
    optimizer: &mut Adam,
    cfg: &DistillConfig,
    ctx: &UpdateContext,
) -> Result<DistillStats> {
    if data.is_empty() {
        return Ok(DistillStats::default());
    }
    let recurrent = student.is_recurrent();
    let (flat_obs, flat_targets) = if recurrent {
        (ObservationSet::new(), Tensor::scalar(0.0))
    } else {
        (data.flat_obs()?, data.flat_targets()?)
    };
    let horizon = data.obs.len();
    let (mut total, mut count) = (0.0f64, 0usize);
    for epoch in 0..cfg.epochs_per_iteration {
        let counter = ctx.iteration * cfg.epochs_per_iteration as u64 + epoch as u64;
        let batches = if recurrent {
            env_groups(ctx, counter, data.num_envs, cfg.minibatches)
                .into_iter()
                .map(|(rows, _)| rows)
                .collect()
        } else {
            stratified_minibatches(ctx, counter, horizon, data.num_envs, cfg.minibatches)
        };
        for rows in &batches {
            let mut params = student.params.clone();
            params.zero_grad();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let (heads, targets) = if recurrent {
                let h_start = data
                    .h_start
                    .as_ref()
                    .ok_or_else(|| Error::State("recurrent dataset without h_start".into()))?;
                let steps = data
                    .obs
                    .iter()
                    .map(|o| o.select_rows(rows))
                    .collect::<Result<Vec<_>>>()?;
                let masks: Vec<Vec<f32>> = data
                    .reset_mask
                    .iter()
                    .map(|m| rows.iter().map(|&b| m[b]).collect())
                    .collect();
                let h0 = tape.constant(h_start.select_rows(rows)?);
                let heads = student.forward_sequence(&mut tape, &vars, &steps, h0, &masks)?;
                let a = student.action_dim();
                let t: Vec<f32> = data
                    .expert_actions
                    .iter()
                    .flat_map(|x| rows.iter().flat_map(move |&b| x.row(b).to_vec()))
                    .collect();
                (heads, Tensor::matrix(horizon * rows.len(), a, t)?)
            } else {
                let obs = flat_obs.select_rows(rows)?;
                (student.forward(&mut tape, &vars, &obs, None)?, flat_targets.select_rows(rows)?)
            };
            let loss = imitation_loss(&mut tape, &vars, student, &heads, &targets, cfg.loss_kind)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    stat: "distill_loss".into(),
                });
            }
            params.backward(&mut tape, loss, &vars)?;
            let mut grads = params.flat_grads();
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            optimizer.step(&mut student.params, &grads, cfg.learning_rate)?;
            total += value as f64;
            count += 1;
        }
    }
    Ok(DistillStats {
        loss: (total / count.max(1) as f64) as f32,
        minibatches: count,
    })
}

/// One distillation run: the student, its optimizer and rollout state.
pub struct Distiller<'a> {
    pub student: GaussianActorCritic,
    pub optimizer: Adam,
    pub state: RolloutState,
    pub config: DistillConfig,
    pub iteration: u64,
    env: &'a mut dyn VecEnv,
    expert: &'a dyn Expert,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillRecord {
    pub iteration: u64,
    pub loss: f32,
    pub beta: f32,
    pub mean_episode_return: Option<f32>,
    /// Episodes completed during this iteration's rollout.
    pub episodes: Vec<EpisodeRecord>,
}

impl<'a> Distiller<'a> {
    pub fn new(
        env: &'a mut dyn VecEnv,
        student: GaussianActorCritic,
        expert: &'a dyn Expert,
        config: DistillConfig,
        seed: u64,
        env_offset: usize,
    ) -> Result<Self> {
        config.validate()?;
        let state = RolloutState::new(env, &student, seed, env_offset);
        let optimizer = Adam::new(student.params.numel());
        Ok(Self {
            student,
            optimizer,
            state,
            config,
            iteration: 0,
            env,
            expert,
        })
    }

    pub fn step(&mut self) -> Result<DistillRecord> {
        let beta = self.config.beta_at(self.iteration);
        let mode = if self.config.student_deterministic {
            ActMode::Mean
        } else {
            ActMode::Sample
        };
        let data = collect_and_relabel(
            self.env,
            &self.student,
            self.expert,
            self.config.rollout_horizon,
            beta,
            mode,
            &mut self.state,
        )?;
        let ctx = UpdateContext {
            streams: self.state.streams,
            iteration: self.iteration,
            env_offset: self.state.env_offset,
            world_size: 1,
        };
        let stats = distill_update(&data, &mut self.student, &mut self.optimizer, &self.config, &ctx)?;
        let episodes = self.state.drain_episodes();
        let mean_episode_return = (!episodes.is_empty())
            .then(|| episodes.iter().map(|e| e.ret).sum::<f32>() / episodes.len() as f32);
        let rec = DistillRecord {
            iteration: self.iteration,
            loss: stats.loss,
            beta,
            mean_episode_return,
            episodes,
        };
        self.iteration += 1;
        Ok(rec)
    }
}

/// Runs `iterations` rounds of collect, relabel and update.
pub fn run_distillation(
    env: &mut dyn VecEnv,
    student: GaussianActorCritic,
    expert: &dyn Expert,
    cfg: &DistillConfig,
    iterations: usize,
    seed: u64,
) -> Result<(GaussianActorCritic, Vec<DistillRecord>)> {
    let mut d = Distiller::new(env, student, expert, cfg.clone(), seed, 0)?;
    let records = (0..iterations).map(|_| d.step()).collect::<Result<Vec<_>>>()?;
    Ok((d.student, records))
}
