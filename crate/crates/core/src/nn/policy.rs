use serde::{Deserialize, Serialize};

use super::{Activation, GruCell, Mlp, MlpSpec, ParamSet};
use crate::autodiff::{Tape, Tensor, Var};
use crate::env::{ObservationSet, CRITIC, POLICY};
use crate::error::{Error, Result};
use crate::rng::{Domain, Streams};

const HALF_LN_2PI: f32 = 0.918_938_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub recurrent: bool,
    pub hidden_dim: usize,
    /// Initial value of every `log_std` entry.
    pub init_log_std: f32,
    /// Scale of the value head's final-layer weights at initialization.
    pub value_init_scale: f32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64, 64],
            activation: Activation::Tanh,
            recurrent: false,
            hidden_dim: 64,
            init_log_std: 0.0,
            value_init_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mean,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    /// `[B × A]`
    pub mean: Var,
    /// `[B]`
    pub value: Var,
    /// `[B × H]` for recurrent networks.
    pub hidden: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ActOutput {
    pub actions: Tensor,
    pub mean: Tensor,
    pub log_prob: Vec<f32>,
    pub value: Vec<f32>,
    pub next_hidden: Option<Tensor>,
}

/// Diagonal-Gaussian actor with a state-independent `log_std` and a value
/// head, optionally preceded by a shared GRU.
///
/// Without recurrence the actor reads the `policy` group and the critic reads
/// `critic` when the environment provides it, otherwise `policy`. With
/// recurrence the GRU consumes `policy` and both heads read its hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianActorCritic {
    pub params: ParamSet,
    actor: Mlp,
    critic: Mlp,
    log_std: usize,
    gru: Option<GruCell>,
    critic_group: String,
    action_dim: usize,
}

impl GaussianActorCritic {
    pub fn new(
        cfg: &NetworkConfig,
        schema: &[(String, usize)],
        action_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let width = |g: &str| schema.iter().find(|(n, _)| n == g).map(|(_, w)| *w);
        let policy_dim = width(POLICY).ok_or_else(|| Error::Routing(POLICY.into()))?;
        let critic_group = if width(CRITIC).is_some() { CRITIC } else { POLICY };
        let critic_dim = width(critic_group).unwrap_or(policy_dim);
        if action_dim == 0 {
            return Err(Error::Config("action_dim must be >= 1".into()));
        }
        let mut params = ParamSet::new();
        let mut rng = Streams::new(seed).rng(Domain::Init, 1, 0);
        let gru = if cfg.recurrent {
            Some(GruCell::init(policy_dim, cfg.hidden_dim, "gru.", &mut params, &mut rng)?)
        } else {
            None
        };
        let (actor_in, critic_in) = match &gru {
            Some(g) => (g.hidden_dim(), g.hidden_dim()),
            None => (policy_dim, critic_dim),
        };
        let spec = |input, output| MlpSpec {
            input_dim: input,
            hidden_sizes: cfg.hidden_sizes.clone(),
            activation: cfg.activation,
            output_dim: output,
        };
        let actor = Mlp::init(&spec(actor_in, action_dim), "actor.", &mut params, &mut rng, 0.01)?;
        let log_std = params.push(
            "log_std",
            Tensor::vector(vec![cfg.init_log_std; action_dim])?.with_requires_grad(true),
        );
        let critic = Mlp::init(&spec(critic_in, 1), "critic.", &mut params, &mut rng, cfg.value_init_scale)?;
        Ok(Self {
            params,
            actor,
            critic,
            log_std,
            gru,
            critic_group: critic_group.to_string(),
            action_dim,
        })
    }

    /// Rebuilds the network around loaded parameters.
    pub fn from_params(params: ParamSet, activation: Activation, critic_group: &str) -> Result<Self> {
        let gru = if params.index_of("gru.w_z").is_some() {
            Some(GruCell::locate(&params, "gru.")?)
        } else {
            None
        };
        let actor = Mlp::locate(&params, "actor.", activation)?;
        let critic = Mlp::locate(&params, "critic.", activation)?;
        let log_std = params
            .index_of("log_std")
            .ok_or_else(|| Error::Format("missing parameter `log_std`".into()))?;
        let action_dim = actor.output_dim();
        Ok(Self {
            params,
            actor,
            critic,
            log_std,
            gru,
            critic_group: critic_group.to_string(),
            action_dim,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn is_recurrent(&self) -> bool {
        self.gru.is_some()
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.gru.as_ref().map(GruCell::hidden_dim)
    }

    pub fn gru(&self) -> Option<&GruCell> {
        self.gru.as_ref()
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic_group(&self) -> &str {
        &self.critic_group
    }

    pub fn log_std(&self) -> &[f32] {
        self.params.get(self.log_std).data()
    }

    pub fn log_std_index(&self) -> usize {
        self.log_std
    }

    /// Single-step forward. For recurrent networks `hidden` is the state
    /// entering this step, already zeroed at episode boundaries.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        obs: &ObservationSet,
        hidden: Option<Var>,
    ) -> Result<Heads> {
        let x = tape.constant(obs.get(POLICY)?.clone());
        let batch = tape.shape(x)[0];
        match &self.gru {
            Some(gru) => {
                let h = hidden.ok_or_else(|| {
                    Error::State("recurrent policy called without hidden state".into())
                })?;
                let h1 = gru.step(tape, vars, x, h)?;
                let mean = self.actor.forward(tape, vars, h1)?;
                let v = self.critic.forward(tape, vars, h1)?;
                let value = tape.reshape(v, vec![batch])?;
                Ok(Heads {
                    mean,
                    value,
                    hidden: Some(h1),
                })
            }
            None => {
                let mean = self.actor.forward(tape, vars, x)?;
                let c = if self.critic_group == POLICY {
                    x
                } else {
                    tape.constant(obs.get(&self.critic_group)?.clone())
                };
                let v = self.critic.forward(tape, vars, c)?;
                let value = tape.reshape(v, vec![batch])?;
                Ok(Heads {
                    mean,
                    value,
                    hidden: None,
                })
            }
        }
    }

    /// Sequence forward for recurrent networks. `steps[t]` holds the
    /// observations of step `t` for the same `B` environments; rows of the
    /// outputs are ordered `t * B + b`.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        steps: &[ObservationSet],
        h0: Var,
        reset_mask: &[Vec<f32>],
    ) -> Result<Heads> {
        let gru = self
            .gru
            .as_ref()
            .ok_or_else(|| Error::State("sequence forward on a feedforward policy".into()))?;
        let xs = steps
            .iter()
            .map(|o| Ok(tape.constant(o.get(POLICY)?.clone())))
            .collect::<Result<Vec<_>>>()?;
        let hs = gru.rollforward(tape, vars, h0, &xs, reset_mask)?;
        let h_all = tape.concat_rows(&hs)?;
        let rows = tape.shape(h_all)[0];
        let mean = self.actor.forward(tape, vars, h_all)?;
        let v = self.critic.forward(tape, vars, h_all)?;
        let value = tape.reshape(v, vec![rows])?;
        Ok(Heads {
            mean,
            value,
            hidden: hs.last().copied(),
        })
    }

    /// Per-sample `log N(actions; mean, diag(exp(log_std)²))`, shape `[B]`.
    pub fn log_prob(&self, tape: &mut Tape, vars: &[Var], mean: Var, actions: Var) -> Result<Var> {
        let log_std = vars[self.log_std];
        let std = tape.exp(log_std)?;
        let diff = tape.sub(actions, mean)?;
        let z = tape.div(diff, std)?;
        let z2 = tape.square(z)?;
        let half = tape.scale(z2, -0.5)?;
        let t = tape.sub(half, log_std)?;
        let t = tape.shift(t, -HALF_LN_2PI)?;
        tape.sum_axes(t, &[1])
    }

    /// `Σ_i (log_std_i + ½ log(2πe))`, a scalar shared by every sample.
    pub fn entropy(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        let s = tape.sum(vars[self.log_std])?;
        tape.shift(s, self.action_dim as f32 * (HALF_LN_2PI + 0.5))
    }

    /// Zero hidden state for `batch` environments.
    pub fn initial_hidden(&self, batch: usize) -> Option<Tensor> {
        self.gru
            .as_ref()
            .map(|g| Tensor::zeros(vec![batch, g.hidden_dim()]).expect("positive dims"))
    }

    /// Acts on a batch. `noise` supplies the standard-normal draws used in
    /// sample mode (`B × A`, row-major). `hidden` must already be zeroed
    /// for environments that just reset.
    pub fn act(
        &self,
        obs: &ObservationSet,
        hidden: Option<&Tensor>,
        mode: ActMode,
        noise: Option<&[f32]>,
    ) -> Result<ActOutput> {
        let mut tape = Tape::new();
        let vars = self.params.register_const(&mut tape);
        let h = hidden.map(|h| tape.constant(h.clone()));
        let heads = self.forward(&mut tape, &vars, obs, h)?;
        let mean = tape.to_tensor(heads.mean);
        let actions = match mode {
            ActMode::Mean => mean.clone(),
            ActMode::Sample => {
                let noise = noise.ok_or_else(|| {
                    Error::Argument("sample mode requires a noise buffer".into())
                })?;
                if noise.len() != mean.numel() {
                    return Err(Error::Shape(format!(
                        "noise of length {} for {} action entries",
                        noise.len(),
                        mean.numel()
                    )));
                }
                let std: Vec<f32> = self.log_std().iter().map(|l| l.exp()).collect();
                let a = self.action_dim;
                let data = mean
                    .data()
                    .iter()
                    .zip(noise)
                    .enumerate()
                    .map(|(i, (&m, &e))| m + std[i % a] * e)
                    .collect();
                Tensor::new(mean.shape().to_vec(), data)?
            }
        };
        let av = tape.constant(actions.clone());
        let lp = self.log_prob(&mut tape, &vars, heads.mean, av)?;
        Ok(ActOutput {
            log_prob: tape.value(lp).to_vec(),
            value: tape.value(heads.value).to_vec(),
            next_hidden: heads.hidden.map(|h| tape.to_tensor(h)),
            actions,
            mean,
        })
    }

    /// Log-probabilities, entropies and values of given actions under the
    /// current parameters (feedforward path).
    pub fn evaluate(
        &self,
        obs: &ObservationSet,
        actions: &Tensor,
        hidden: Option<&Tensor>,
    ) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
        if actions.shape().len() != 2 || actions.row_width() != self.action_dim {
            return Err(Error::Shape(format!(
                "actions {:?} for action dim {}",
                actions.shape(),
                self.action_dim
            )));
        }
        let mut tape = Tape::new();
        let vars = self.params.register_const(&mut tape);
        let h = hidden.map(|h| tape.constant(h.clone()));
        let heads = self.forward(&mut tape, &vars, obs, h)?;
        if tape.shape(heads.mean) != actions.shape() {
            return Err(Error::Shape(format!(
                "actions {:?} for a batch producing {:?}",
                actions.shape(),
                tape.shape(heads.mean)
            )));
        }
        let av = tape.constant(actions.clone());
        let lp = self.log_prob(&mut tape, &vars, heads.mean, av)?;
        let ent = self.entropy(&mut tape, &vars)?;
        let b = actions.rows();
        Ok((
            tape.value(lp).to_vec(),
            vec![tape.scalar_value(ent); b],
            tape.value(heads.value).to_vec(),
        ))
    }

    /// Critic values for arbitrary rows (feedforward) or for one step from
    /// the given hidden state (recurrent).
    pub fn values(&self, obs: &ObservationSet, hidden: Option<&Tensor>) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let vars = self.params.register_const(&mut tape);
        let h = hidden.map(|h| tape.constant(h.clone()));
        let heads = self.forward(&mut tape, &vars, obs, h)?;
        Ok(tape.value(heads.value).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(rows: usize, width: usize, seed: u64) -> ObservationSet {
        let v = Streams::new(seed).normals(Domain::Init, 5, 0, rows * width);
        ObservationSet::new()
            .with(POLICY, Tensor::matrix(rows, width, v).unwrap())
            .unwrap()
    }

    fn net(cfg: &NetworkConfig) -> GaussianActorCritic {
        GaussianActorCritic::new(cfg, &[(POLICY.into(), 3)], 2, 1).unwrap()
    }

    #[test]
    fn mean_mode_returns_mean() {
        let n = net(&NetworkConfig::default());
        let o = obs(4, 3, 0);
        let out = n.act(&o, None, ActMode::Mean, None).unwrap();
        assert_eq!(out.actions, out.mean);
    }

    #[test]
    fn standard_normal_at_mode() {
        let mut n = net(&NetworkConfig::default());
        // Zero the actor so μ = 0; σ = 1 from init.
        let names: Vec<usize> = (0..n.params.len())
            .filter(|&i| n.params.names()[i].starts_with("actor."))
            .collect();
        for i in names {
            n.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let o = obs(1, 3, 0);
        let out = n.act(&o, None, ActMode::Mean, None).unwrap();
        assert!((out.log_prob[0] - 2.0 * -HALF_LN_2PI).abs() < 1e-6);
    }

    #[test]
    fn entropy_closed_forms() {
        let mut n = net(&NetworkConfig::default());
        let o = obs(3, 3, 1);
        let a = Tensor::zeros(vec![3, 2]).unwrap();
        let (_, e1, _) = n.evaluate(&o, &a, None).unwrap();
        let base = 2.0 * 0.5 * (2.0 * std::f32::consts::PI * std::f32::consts::E).ln();
        assert!((e1[0] - base).abs() < 1e-5);
        let i = n.log_std_index();
        n.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v += 2f32.ln());
        let (_, e2, _) = n.evaluate(&o, &a, None).unwrap();
        assert!((e2[0] - e1[0] - 2.0 * 2f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn evaluate_reproduces_act_log_probs() {
        let n = net(&NetworkConfig::default());
        let o = obs(16, 3, 2);
        let noise = Streams::new(3).normals(Domain::Action, 0, 0, 32);
        let out = n.act(&o, None, ActMode::Sample, Some(&noise)).unwrap();
        let (lp, _, v) = n.evaluate(&o, &out.actions, None).unwrap();
        for (x, y) in lp.iter().zip(&out.log_prob) {
            assert!((x - y).abs() <= 1e-6);
        }
        assert_eq!(v, out.value);
    }

    #[test]
    fn missing_group_is_routing_error() {
        let n = net(&NetworkConfig::default());
        let o = ObservationSet::new()
            .with(CRITIC, Tensor::zeros(vec![1, 3]).unwrap())
            .unwrap();
        assert!(matches!(
            n.act(&o, None, ActMode::Mean, None),
            Err(Error::Routing(g)) if g == POLICY
        ));
    }

    #[test]
    fn asymmetric_critic_reads_its_group() {
        let n = GaussianActorCritic::new(
            &NetworkConfig::default(),
            &[(POLICY.into(), 2), (CRITIC.into(), 5)],
            1,
            0,
        )
        .unwrap();
        assert_eq!(n.critic_group(), CRITIC);
        let o = ObservationSet::new()
            .with(POLICY, Tensor::zeros(vec![2, 2]).unwrap())
            .unwrap();
        assert!(matches!(n.values(&o, None), Err(Error::Routing(_))));
        let o = o.with(CRITIC, Tensor::zeros(vec![2, 5]).unwrap()).unwrap();
        assert_eq!(n.values(&o, None).unwrap().len(), 2);
    }

    #[test]
    fn final_actor_layer_is_scaled_down() {
        let n = net(&NetworkConfig::default());
        let last = n.params.by_name("actor.2.weight").unwrap();
        assert!(last.data().iter().all(|v| v.abs() <= 0.01 / 8.0 + 1e-7));
        assert!(n.log_std().iter().all(|&v| v == 0.0));
    }
}
