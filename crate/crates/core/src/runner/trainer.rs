use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{Checkpoint, ExportedPolicy, RngState};
use super::metrics::{EpisodeSummary, MetricsRecord, MetricsWriter};
use super::RunConfig;
use crate::distill::{DistillConfig, Distiller, Expert, ExpertSource, LqrExpert, PolicyExpert};
use crate::distributed::{Collective, Local};
use crate::env::{make_env, EnvName, VecEnv};
use crate::error::{Error, Result};
use crate::extensions::RndState;
use crate::nn::{ActMode, GaussianActorCritic, ParamSet};
use crate::ppo::{collect_rollout, compute_gae, update, Learner, PpoConfig, RolloutState, UpdateContext, UpdateStats};

/// Iterations between cross-rank parameter checksums.
pub const CHECKSUM_INTERVAL: u64 = 50;

const RND_PREFIX_TARGET: &str = "rnd.target.";
const RND_PREFIX_PREDICTOR: &str = "rnd.predictor.";

/// Outcome of one PPO iteration on this rank.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub iteration: u64,
    pub stats: UpdateStats,
    /// Completed-episode statistics summed over every rank.
    pub episodes: EpisodeSummary,
    pub intrinsic_reward_mean: Option<f32>,
}

/// PPO learn loop for one rank: collect, extension hooks, GAE, update.
pub struct Trainer {
    pub config: RunConfig,
    pub learner: Learner,
    pub state: RolloutState,
    pub iteration: u64,
    pub total_env_steps: u64,
    env: Box<dyn VecEnv>,
    collective: Box<dyn Collective>,
}

fn build_policy(config: &RunConfig, env: &dyn VecEnv) -> Result<GaussianActorCritic> {
    let spec = env.spec();
    GaussianActorCritic::new(&config.network, &spec.schema, spec.action_dim, config.seed)
}

impl Trainer {
    pub fn new(config: RunConfig, collective: Box<dyn Collective>) -> Result<Self> {
        config.validate()?;
        let b = config.env.num_envs;
        let env = make_env(&config.env, b, collective.rank() * b)?;
        Self::with_env(config, env, collective)
    }

    /// Like [`Trainer::new`] with a caller-supplied environment of
    /// `config.env.num_envs` copies.
    pub fn with_env(config: RunConfig, mut env: Box<dyn VecEnv>, mut collective: Box<dyn Collective>) -> Result<Self> {
        config.validate()?;
        let ppo = config
            .ppo()
            .ok_or_else(|| Error::Config("trainer requires an algo.ppo block".into()))?
            .clone();
        let env_offset = collective.rank() * config.env.num_envs;
        let policy = build_policy(&config, env.as_ref())?;
        let mut learner = Learner::new(policy, ppo.learning_rate);
        let schema = env.spec().schema.clone();
        if let Some(spec) = &config.extensions.symmetry {
            spec.check_schema(&schema, env.spec().action_dim)?;
            learner.symmetry = Some(spec.clone());
        }
        if let Some(rc) = &config.extensions.rnd {
            let width = schema
                .iter()
                .find(|(g, _)| *g == rc.group)
                .map(|(_, w)| *w)
                .ok_or_else(|| Error::Config(format!("rnd group `{}` is not provided by the env", rc.group)))?;
            learner.rnd = Some(RndState::new(rc.clone(), width, config.seed)?);
        }
        let mut flat = learner.flat_params();
        collective.broadcast(&mut flat)?;
        learner.load_flat_params(&flat)?;
        let state = RolloutState::new(env.as_mut(), &learner.policy, config.seed, env_offset);
        Ok(Self {
            config,
            learner,
            state,
            iteration: 0,
            total_env_steps: 0,
            env,
            collective,
        })
    }

    pub fn single_process(config: RunConfig) -> Result<Self> {
        Self::new(config, Box::new(Local))
    }

    pub fn ppo_config(&self) -> &PpoConfig {
        self.config.ppo().expect("checked at construction")
    }

    pub fn rank(&self) -> usize {
        self.collective.rank()
    }

    pub fn collective(&mut self) -> &mut dyn Collective {
        self.collective.as_mut()
    }

    pub fn step(&mut self) -> Result<IterationReport> {
        let cfg = self.ppo_config().clone();
        let mut buf = collect_rollout(self.env.as_mut(), &self.learner.policy, &cfg, &mut self.state)?;
        let mut intrinsic_reward_mean = None;
        if let Some(rnd) = &mut self.learner.rnd {
            let mut sum = 0.0f64;
            for t in 0..buf.horizon() {
                let next = buf.next_obs(t)?;
                let r = rnd.intrinsic_rewards_with(&next, self.collective.as_mut())?;
                for (dst, ri) in buf.rewards[t].iter_mut().zip(r) {
                    *dst += ri;
                    sum += ri as f64;
                }
            }
            let mut m = [(sum / buf.num_samples() as f64) as f32];
            self.collective.average(&mut m)?;
            intrinsic_reward_mean = Some(m[0]);
        }
        compute_gae(&mut buf, cfg.gamma, cfg.lambda)?;
        let ctx = UpdateContext {
            streams: self.state.streams,
            iteration: self.iteration,
            env_offset: self.state.env_offset,
            world_size: self.collective.world_size(),
        };
        let stats = update(&buf, &mut self.learner, &cfg, &ctx, self.collective.as_mut())?;
        self.iteration += 1;
        self.total_env_steps += (buf.num_samples() * self.collective.world_size()) as u64;
        if self.iteration.is_multiple_of(CHECKSUM_INTERVAL) {
            self.collective.verify(&self.learner.flat_params())?;
        }
        let mut local = EpisodeSummary::default();
        local.add(&self.state.drain_episodes());
        let mut arr = local.as_array();
        self.collective.average(&mut arr)?;
        let w = self.collective.world_size() as f32;
        let episodes = EpisodeSummary::from_array(arr.map(|v| v * w));
        Ok(IterationReport {
            iteration: self.iteration,
            stats,
            episodes,
            intrinsic_reward_mean,
        })
    }

    /// Policy parameters followed by the RND target and predictor.
    pub fn params(&self) -> ParamSet {
        let mut p = self.learner.policy.params.clone();
        if let Some(r) = &self.learner.rnd {
            p.extend_prefixed(RND_PREFIX_TARGET, &r.pair.target);
            p.extend_prefixed(RND_PREFIX_PREDICTOR, &r.pair.predictor);
        }
        p
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            total_env_steps: self.total_env_steps,
            rng_state: RngState {
                seed: self.config.seed,
                rollout_step: self.state.step,
                learning_rate: self.learner.learning_rate,
            },
            params: self.params(),
        }
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.collective.shutdown()
    }
}

/// Rebuilds the policy stored in a checkpoint.
pub fn policy_from_checkpoint(ckpt: &Checkpoint) -> Result<GaussianActorCritic> {
    let env = make_env(&ckpt.config.env, 1, 0)?;
    let mut policy = build_policy(&ckpt.config, env.as_ref())?;
    ckpt.restore_into("", &mut policy.params)?;
    Ok(policy)
}

/// Paths produced by a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

struct Clock {
    start: Instant,
    last: Instant,
    last_steps: u64,
    enabled: bool,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            last_steps: 0,
            enabled,
        }
    }

    /// `(wall_time_s, steps_per_second)` since the previous call.
    fn tick(&mut self, total_steps: u64) -> (f64, f64) {
        if !self.enabled {
            return (0.0, 0.0);
        }
        let now = Instant::now();
        let dt = now.duration_since(self.last).as_secs_f64();
        let sps = if dt > 0.0 {
            (total_steps - self.last_steps) as f64 / dt
        } else {
            0.0
        };
        self.last = now;
        self.last_steps = total_steps;
        (now.duration_since(self.start).as_secs_f64(), sps)
    }
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs PPO for `config.max_iterations`. Rank 0 writes `metrics.jsonl`,
/// periodic `checkpoint_NNNNNN.ckpt` files and `final.ckpt`; other ranks
/// write nothing and return `None`.
pub fn run_training_with(config: RunConfig, collective: Box<dyn Collective>) -> Result<Option<RunOutput>> {
    config.validate()?;
    let mut trainer = Trainer::new(config, collective)?;
    let lead = trainer.rank() == 0;
    let out_dir = trainer.config.out_dir.clone();
    let mut writer = if lead {
        prepare_out_dir(&out_dir)?;
        Some(MetricsWriter::create(&out_dir.join("metrics.jsonl"))?)
    } else {
        None
    };
    let mut clock = Clock::new(trainer.config.record_timing);
    let mut window = EpisodeSummary::default();
    let max = trainer.config.max_iterations as u64;
    let log_interval = trainer.config.log_interval as u64;
    let ckpt_interval = trainer.config.checkpoint_interval as u64;
    while trainer.iteration < max {
        let report = trainer.step()?;
        let ep = report.episodes.as_array();
        let acc = window.as_array();
        window = EpisodeSummary::from_array(std::array::from_fn(|i| acc[i] + ep[i]));
        let it = report.iteration;
        if let Some(w) = writer.as_mut() {
            if it % log_interval == 0 || it == max {
                let (wall, sps) = clock.tick(trainer.total_env_steps);
                let s = &report.stats;
                w.write(&MetricsRecord {
                    iteration: it,
                    total_env_steps: trainer.total_env_steps,
                    wall_time_s: wall,
                    mean_episode_return: window.mean_return(),
                    mean_episode_length: window.mean_length(),
                    surrogate_loss: Some(s.surrogate_loss),
                    value_loss: Some(s.value_loss),
                    entropy: Some(s.entropy),
                    approx_kl: Some(s.approx_kl),
                    learning_rate: s.learning_rate,
                    clip_fraction: Some(s.clip_fraction),
                    symmetry_loss: s.symmetry_loss,
                    intrinsic_reward_mean: report.intrinsic_reward_mean,
                    distill_loss: None,
                    success_rate: window.success_rate(),
                    steps_per_second: sps,
                })?;
                window = EpisodeSummary::default();
            }
            if it % ckpt_interval == 0 && it != max {
                trainer
                    .checkpoint()
                    .save(&out_dir.join(format!("checkpoint_{it:06}.ckpt")))?;
            }
        }
    }
    let result = match writer {
        Some(w) => {
            let path = out_dir.join("final.ckpt");
            trainer.checkpoint().save(&path)?;
            Some(RunOutput {
                checkpoint: path,
                metrics: w.path().to_path_buf(),
            })
        }
        None => None,
    };
    trainer.shutdown()?;
    Ok(result)
}

/// Single-process training.
pub fn run_training(config: RunConfig) -> Result<RunOutput> {
    Ok(run_training_with(config, Box::new(Local))?.expect("rank 0 always writes"))
}

/// Builds the expert named by `cfg`, or the teacher checkpoint when given.
pub fn make_expert(config: &RunConfig, cfg: &DistillConfig, teacher: Option<&Path>) -> Result<Box<dyn Expert>> {
    let source = match teacher {
        Some(p) => ExpertSource::Checkpoint(p.to_path_buf()),
        None => cfg.expert.clone(),
    };
    match source {
        ExpertSource::Lqr => {
            if config.env.name != EnvName::PointMass {
                return Err(Error::Config("the lqr expert requires env point_mass".into()));
            }
            Ok(Box::new(LqrExpert::point_mass()?))
        }
        ExpertSource::Checkpoint(p) => {
            let ckpt = Checkpoint::load(&p)?;
            Ok(Box::new(PolicyExpert::new(policy_from_checkpoint(&ckpt)?)?))
        }
    }
}

/// Runs DAgger distillation of a fresh student. Writes `metrics.jsonl` and
/// `final.ckpt` under `out_dir`.
pub fn run_distill(config: RunConfig, teacher: Option<&Path>) -> Result<RunOutput> {
    config.validate()?;
    let dcfg = config
        .distill()
        .ok_or_else(|| Error::Config("distill requires an algo.distill block".into()))?
        .clone();
    let expert = make_expert(&config, &dcfg, teacher)?;
    let iterations = dcfg.iterations.unwrap_or(config.max_iterations) as u64;
    let mut env = make_env(&config.env, config.env.num_envs, 0)?;
    let student = build_policy(&config, env.as_ref())?;
    let out_dir = config.out_dir.clone();
    prepare_out_dir(&out_dir)?;
    let mut writer = MetricsWriter::create(&out_dir.join("metrics.jsonl"))?;
    let mut clock = Clock::new(config.record_timing);
    let batch = (dcfg.rollout_horizon * config.env.num_envs) as u64;
    let mut d = Distiller::new(env.as_mut(), student, expert.as_ref(), dcfg.clone(), config.seed, 0)?;
    let mut window = EpisodeSummary::default();
    let mut steps = 0u64;
    while d.iteration < iterations {
        let rec = d.step()?;
        steps += batch;
        window.add(&rec.episodes);
        let it = d.iteration;
        if it % config.log_interval as u64 == 0 || it == iterations {
            let (wall, sps) = clock.tick(steps);
            writer.write(&MetricsRecord {
                iteration: it,
                total_env_steps: steps,
                wall_time_s: wall,
                mean_episode_return: window.mean_return(),
                mean_episode_length: window.mean_length(),
                surrogate_loss: None,
                value_loss: None,
                entropy: None,
                approx_kl: None,
                learning_rate: dcfg.learning_rate,
                clip_fraction: None,
                symmetry_loss: None,
                intrinsic_reward_mean: None,
                distill_loss: Some(rec.loss),
                success_rate: window.success_rate(),
                steps_per_second: sps,
            })?;
            window = EpisodeSummary::default();
        }
    }
    let ckpt = Checkpoint {
        rng_state: RngState {
            seed: config.seed,
            rollout_step: d.state.step,
            learning_rate: dcfg.learning_rate,
        },
        iteration: d.iteration,
        total_env_steps: steps,
        params: d.student.params.clone(),
        config,
    };
    let path = out_dir.join("final.ckpt");
    ckpt.save(&path)?;
    Ok(RunOutput {
        checkpoint: path,
        metrics: writer.path().to_path_buf(),
    })
}

/// Aggregate of `episodes` evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f32,
    pub std_return: f32,
    pub mean_length: f32,
    pub success_rate: Option<f32>,
    pub returns: Vec<f32>,
}

/// Runs the first episode of each of `episodes` fresh environments without
/// learning. Counters start at zero so every episode has full length.
pub fn evaluate_policy(
    policy: &GaussianActorCritic,
    config: &RunConfig,
    episodes: usize,
    deterministic: bool,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Argument("evaluation needs at least one episode".into()));
    }
    let mut env_cfg = config.env.clone();
    env_cfg.overrides.random_init_counters = false;
    let mut env = make_env(&env_cfg, episodes, 0)?;
    let mut state = RolloutState::new(env.as_mut(), policy, seed, 0);
    let a = env.spec().action_dim;
    let mode = if deterministic { ActMode::Mean } else { ActMode::Sample };
    let mut ret = vec![0.0f32; episodes];
    let mut len = vec![0usize; episodes];
    let mut success = vec![None; episodes];
    let mut open = vec![true; episodes];
    let mut remaining = episodes;
    while remaining > 0 {
        let h = state.masked_hidden();
        let noise = state.action_noise(a);
        let out = policy.act(&state.obs, h.as_ref(), mode, Some(&noise))?;
        let res = env.step(&out.actions)?;
        for b in 0..episodes {
            if !open[b] {
                continue;
            }
            ret[b] += res.reward[b];
            len[b] += 1;
            if res.done(b) {
                open[b] = false;
                success[b] = env.success(res.terminated[b], ret[b]);
                remaining -= 1;
            }
        }
        state.reset_flags = (0..episodes).map(|b| res.done(b)).collect();
        state.obs = res.obs;
        state.hidden = out.next_hidden;
        state.step += 1;
    }
    let n = episodes as f64;
    let mean = ret.iter().map(|&r| r as f64).sum::<f64>() / n;
    let var = ret.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
    let defined: Vec<bool> = success.iter().flatten().copied().collect();
    Ok(EvalReport {
        episodes,
        mean_return: mean as f32,
        std_return: var.sqrt() as f32,
        mean_length: (len.iter().sum::<usize>() as f64 / n) as f32,
        success_rate: (!defined.is_empty())
            .then(|| defined.iter().filter(|&&s| s).count() as f32 / defined.len() as f32),
        returns: ret,
    })
}

/// Evaluates a checkpoint on the environment described by its config.
pub fn evaluate(checkpoint: &Path, episodes: usize, deterministic: bool) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Argument("evaluation needs at least one episode".into()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let policy = policy_from_checkpoint(&ckpt)?;
    evaluate_policy(&policy, &ckpt.config, episodes, deterministic, ckpt.config.seed.wrapping_add(1))
}

/// Writes the deployment policy of `checkpoint` to `out`.
pub fn export_policy(checkpoint: &Path, out: &Path) -> Result<ExportedPolicy> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let env = make_env(&ckpt.config.env, 1, 0)?;
    let policy = policy_from_checkpoint(&ckpt)?;
    let exported = ExportedPolicy::from_params(&policy.params, ckpt.config.network.activation, env.spec().schema.clone())?;
    exported.save(out)?;
    Ok(exported)
}
