use rand::seq::SliceRandom;

use super::{adapt_lr, ppo_loss, ppo_loss_from_heads, LossStats, Minibatch, PpoConfig, RolloutBuffer};
use crate::autodiff::{Tape, Tensor};
use crate::distributed::Collective;
use crate::env::ObservationSet;
use crate::error::{Error, Result};
use crate::extensions::{augment_batch, symmetry_loss, RndState, SymmetrySpec};
use crate::nn::{clip_grad_norm, grad_norm, Adam, GaussianActorCritic};
use crate::rng::{Domain, Streams};

/// Trainable state of a PPO run.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub policy: GaussianActorCritic,
    pub optimizer: Adam,
    pub learning_rate: f32,
    pub rnd: Option<RndState>,
    pub symmetry: Option<SymmetrySpec>,
}

impl Learner {
    pub fn new(policy: GaussianActorCritic, learning_rate: f32) -> Self {
        let optimizer = Adam::new(policy.params.numel());
        Self {
            policy,
            optimizer,
            learning_rate,
            rnd: None,
            symmetry: None,
        }
    }

    /// Length of the flat vector exchanged between workers: policy, RND
    /// target, RND predictor.
    pub fn flat_len(&self) -> usize {
        self.policy.params.numel()
            + self
                .rnd
                .as_ref()
                .map_or(0, |r| r.pair.target.numel() + r.pair.predictor.numel())
    }

    /// All parameters in canonical order.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut v = self.policy.params.flat_values();
        if let Some(r) = &self.rnd {
            v.extend(r.pair.target.flat_values());
            v.extend(r.pair.predictor.flat_values());
        }
        v
    }

    pub fn load_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.flat_len()
            )));
        }
        let np = self.policy.params.numel();
        self.policy.params.load_flat(&flat[..np])?;
        if let Some(r) = &mut self.rnd {
            let nt = r.pair.target.numel();
            r.pair.target.load_flat(&flat[np..np + nt])?;
            r.pair.predictor.load_flat(&flat[np + nt..])?;
        }
        Ok(())
    }
}

/// Addresses the shuffling streams of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateContext {
    pub streams: Streams,
    pub iteration: u64,
    /// Global index of local environment 0.
    pub env_offset: usize,
    /// Ranks sharing the update, each with the same number of environments.
    pub world_size: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub surrogate_loss: f32,
    pub value_loss: f32,
    pub entropy: f32,
    pub approx_kl: f32,
    pub clip_fraction: f32,
    pub learning_rate: f32,
    pub symmetry_loss: Option<f32>,
    pub rnd_loss: Option<f32>,
    pub minibatches: usize,
    /// Samples in the first minibatch, after augmentation.
    pub minibatch_size: usize,
    /// Largest gradient norm seen after clipping.
    pub max_clipped_grad_norm: f32,
}

fn normalized_advantages(adv: &[f32], collective: &mut dyn Collective) -> Result<Vec<f32>> {
    let n = adv.len() as f64;
    let mut mean = [(adv.iter().map(|&a| a as f64).sum::<f64>() / n) as f32];
    collective.average(&mut mean)?;
    let m = mean[0] as f64;
    let mut sq = [(adv.iter().map(|&a| (a as f64 - m).powi(2)).sum::<f64>() / n) as f32];
    collective.average(&mut sq)?;
    let total = n * collective.world_size() as f64;
    let var = sq[0] as f64 * total / (total - 1.0).max(1.0);
    let std = var.sqrt() as f32;
    Ok(adv.iter().map(|&a| (a - mean[0]) / (std + 1e-8)).collect())
}

/// Per-environment shuffle of the time axis split into `m` chunks: chunk `k`
/// of every environment forms minibatch `k`. Returns flat row indices.
pub(crate) fn stratified_minibatches(
    ctx: &UpdateContext,
    counter: u64,
    horizon: usize,
    num_envs: usize,
    m: usize,
) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); m];
    for b in 0..num_envs {
        let mut perm: Vec<usize> = (0..horizon).collect();
        let mut rng = ctx
            .streams
            .rng(Domain::Shuffle, (ctx.env_offset + b) as u64, counter);
        perm.shuffle(&mut rng);
        for (k, mb) in out.iter_mut().enumerate() {
            let (lo, hi) = (k * horizon / m, (k + 1) * horizon / m);
            mb.extend(perm[lo..hi].iter().map(|&t| t * num_envs + b));
        }
    }
    out.retain(|mb| !mb.is_empty());
    out
}

/// Recurrent minibatches: a shared shuffle of all global environments is
/// split into up to `m` groups; each rank keeps its own members. The weight
/// `local · world / group` rescales a local mean so that the rank average
/// equals the mean over the whole group. Groups may be empty on a rank.
pub(crate) fn env_groups(ctx: &UpdateContext, counter: u64, num_envs: usize, m: usize) -> Vec<(Vec<usize>, f32)> {
    let world = ctx.world_size.max(1);
    let total = num_envs * world;
    let mut envs: Vec<usize> = (0..total).collect();
    let mut rng = ctx.streams.rng(Domain::Shuffle, u64::MAX, counter);
    envs.shuffle(&mut rng);
    let m = m.min(total);
    let local = ctx.env_offset..ctx.env_offset + num_envs;
    (0..m)
        .map(|k| {
            let group = &envs[k * total / m..(k + 1) * total / m];
            let mine: Vec<usize> = group
                .iter()
                .filter(|g| local.contains(g))
                .map(|g| g - ctx.env_offset)
                .collect();
            let w = (mine.len() * world) as f32 / group.len() as f32;
            (mine, w)
        })
        .collect()
}

struct Accum {
    stats: LossStats,
    sym: f64,
    rnd: f64,
    count: usize,
}

/// PPO update over `cfg.epochs` passes of `cfg.num_minibatches` minibatches.
///
/// Every minibatch gradient (policy plus RND predictor) is averaged through
/// `collective` before clipping and the optimizer step. The learning rate is
/// adapted after each epoch from the rank-averaged mean KL.
pub fn update(
    buffer: &RolloutBuffer,
    learner: &mut Learner,
    cfg: &PpoConfig,
    ctx: &UpdateContext,
    collective: &mut dyn Collective,
) -> Result<UpdateStats> {
    if !buffer.has_advantages() {
        return Err(Error::State("update called before compute_gae".into()));
    }
    let recurrent = learner.policy.is_recurrent();
    if recurrent && learner.symmetry.is_some() {
        return Err(Error::Config("symmetry extensions require a feedforward policy".into()));
    }
    let advantages = if cfg.normalize_advantages {
        normalized_advantages(&buffer.advantages, collective)?
    } else {
        buffer.advantages.clone()
    };
    let snapshot = learner
        .symmetry
        .as_ref()
        .filter(|s| s.use_augmentation)
        .map(|_| learner.policy.clone());
    let (flat_obs, flat_actions) = if recurrent {
        (ObservationSet::new(), Tensor::scalar(0.0))
    } else {
        (buffer.flat_obs()?, buffer.flat_actions()?)
    };

    let mut acc = Accum {
        stats: LossStats::default(),
        sym: 0.0,
        rnd: 0.0,
        count: 0,
    };
    let mut out = UpdateStats::default();
    for epoch in 0..cfg.epochs {
        let counter = ctx.iteration * cfg.epochs as u64 + epoch as u64;
        let mut epoch_kl = 0.0f64;
        let mut epoch_count = 0usize;
        let batches = if recurrent {
            env_groups(ctx, counter, buffer.num_envs, cfg.num_minibatches)
        } else {
            stratified_minibatches(ctx, counter, buffer.horizon(), buffer.num_envs, cfg.num_minibatches)
                .into_iter()
                .map(|rows| (rows, 1.0))
                .collect()
        };
        for (rows, weight) in &batches {
            if rows.is_empty() {
                let mut flat = vec![0.0; learner.flat_len()];
                collective.allreduce_mean(&mut flat)?;
                apply_step(learner, &mut flat, cfg, &mut out)?;
                epoch_count += 1;
                acc.count += 1;
                continue;
            }
            let mut tape = Tape::new();
            let mut params = learner.policy.params.clone();
            params.zero_grad();
            let vars = params.register(&mut tape);
            let (loss, stats, rnd_obs, sym_value, size) = if recurrent {
                let (heads, mb) = sequence_batch(&mut tape, &vars, &learner.policy, buffer, &advantages, rows)?;
                let (loss, stats) = ppo_loss_from_heads(&mut tape, &vars, &learner.policy, &heads, &mb, cfg)?;
                let n = mb.len();
                (loss, stats, mb.obs, None, n)
            } else {
                let mb = buffer.gather(&flat_obs, &flat_actions, &advantages, rows)?;
                let rnd_obs = mb.obs.clone();
                let mb = match (&learner.symmetry, &snapshot) {
                    (Some(spec), Some(snap)) => augment_batch(&mb, spec, snap)?,
                    _ => mb,
                };
                let (mut loss, stats) = ppo_loss(&mut tape, &vars, &learner.policy, &mb, cfg)?;
                let mut sym_value = None;
                if let Some(spec) = learner.symmetry.as_ref().filter(|s| s.use_loss) {
                    let l = symmetry_loss(&mut tape, &vars, &learner.policy, &rnd_obs, spec)?;
                    sym_value = Some(tape.scalar_value(l));
                    let wl = tape.scale(l, spec.weight)?;
                    loss = tape.add(loss, wl)?;
                }
                let n = mb.len();
                (loss, stats, rnd_obs, sym_value, n)
            };
            params.backward(&mut tape, loss, &vars)?;
            let mut flat = params.flat_grads();
            let mut rnd_loss = None;
            if let Some(rnd) = &learner.rnd {
                let (l, g) = rnd.loss_grads(&rnd_obs)?;
                rnd_loss = Some(l);
                flat.extend(std::iter::repeat_n(0.0, rnd.pair.target.numel()));
                flat.extend(g);
            }
            let w = *weight;
            if w != 1.0 {
                flat.iter_mut().for_each(|g| *g *= w);
            }
            collective.allreduce_mean(&mut flat)?;
            apply_step(learner, &mut flat, cfg, &mut out)?;
            if out.minibatch_size == 0 {
                out.minibatch_size = size;
            }
            epoch_kl += (stats.approx_kl * w) as f64;
            epoch_count += 1;
            acc.stats.surrogate_loss += stats.surrogate_loss * w;
            acc.stats.value_loss += stats.value_loss * w;
            acc.stats.entropy += stats.entropy * w;
            acc.stats.approx_kl += stats.approx_kl * w;
            acc.stats.clip_fraction += stats.clip_fraction * w;
            acc.sym += sym_value.unwrap_or(0.0) as f64;
            acc.rnd += (rnd_loss.unwrap_or(0.0) * w) as f64;
            acc.count += 1;
        }
        if cfg.adaptive_lr && epoch_count > 0 {
            let mut kl = [(epoch_kl / epoch_count as f64) as f32];
            collective.average(&mut kl)?;
            learner.learning_rate = adapt_lr(kl[0], learner.learning_rate, cfg);
        }
    }
    let c = acc.count.max(1) as f32;
    let mut summary = [
        acc.stats.surrogate_loss / c,
        acc.stats.value_loss / c,
        acc.stats.entropy / c,
        acc.stats.approx_kl / c,
        acc.stats.clip_fraction / c,
        acc.sym as f32 / c,
        acc.rnd as f32 / c,
    ];
    collective.average(&mut summary)?;
    out.surrogate_loss = summary[0];
    out.value_loss = summary[1];
    out.entropy = summary[2];
    out.approx_kl = summary[3];
    out.clip_fraction = summary[4];
    out.symmetry_loss = learner
        .symmetry
        .as_ref()
        .filter(|s| s.use_loss)
        .map(|_| summary[5]);
    out.rnd_loss = learner.rnd.as_ref().map(|_| summary[6]);
    out.learning_rate = learner.learning_rate;
    out.minibatches = acc.count;
    Ok(out)
}

/// Clips the averaged policy gradient and steps the policy and, when present,
/// the RND predictor.
fn apply_step(learner: &mut Learner, flat: &mut [f32], cfg: &PpoConfig, out: &mut UpdateStats) -> Result<()> {
    let np = learner.policy.params.numel();
    let policy_grads = &mut flat[..np];
    clip_grad_norm(policy_grads, cfg.max_grad_norm);
    out.max_clipped_grad_norm = out.max_clipped_grad_norm.max(grad_norm(policy_grads));
    learner
        .optimizer
        .step(&mut learner.policy.params, policy_grads, learner.learning_rate)?;
    if let Some(rnd) = &mut learner.rnd {
        let skip = np + rnd.pair.target.numel();
        rnd.apply(&flat[skip..])?;
    }
    Ok(())
}

/// Runs the recurrent forward over the full horizon for the environments in
/// `envs`, returning heads and a minibatch with rows ordered `t * G + g`.
fn sequence_batch(
    tape: &mut Tape,
    vars: &[crate::autodiff::Var],
    policy: &GaussianActorCritic,
    buffer: &RolloutBuffer,
    advantages: &[f32],
    envs: &[usize],
) -> Result<(crate::nn::Heads, Minibatch)> {
    let h_start = buffer
        .h_start
        .as_ref()
        .ok_or_else(|| Error::State("recurrent rollout without h_start".into()))?;
    let steps = buffer
        .obs
        .iter()
        .map(|o| o.select_rows(envs))
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<Vec<f32>> = buffer
        .reset_mask
        .iter()
        .map(|m| envs.iter().map(|&b| m[b]).collect())
        .collect();
    let h0 = tape.constant(h_start.select_rows(envs)?);
    let heads = policy.forward_sequence(tape, vars, &steps, h0, &masks)?;
    let b_len = buffer.num_envs;
    let rows: Vec<usize> = (0..buffer.horizon())
        .flat_map(|t| envs.iter().map(move |&b| t * b_len + b))
        .collect();
    let values = RolloutBuffer::flat(&buffer.values);
    let log_probs = RolloutBuffer::flat(&buffer.log_probs);
    let pick = |v: &[f32]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
    let actions = Tensor::matrix(
        rows.len(),
        policy.action_dim(),
        buffer
            .actions
            .iter()
            .flat_map(|a| envs.iter().flat_map(move |&b| a.row(b).to_vec()))
            .collect(),
    )?;
    let mb = Minibatch {
        obs: ObservationSet::concat(&steps.iter().collect::<Vec<_>>())?,
        actions,
        old_log_prob: pick(&log_probs),
        old_value: pick(&values),
        advantages: pick(advantages),
        returns: pick(&buffer.returns),
    };
    Ok((heads, mb))
}
