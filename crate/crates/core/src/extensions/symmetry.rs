use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::env::{ObservationSet, POLICY};
use crate::error::{Error, Result};
use crate::nn::GaussianActorCritic;
use crate::ppo::Minibatch;

/// Output index `i` takes `sign * x[source]`, written as `[source, sign]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SignedPermutation(pub Vec<(usize, f32)>);

impl SignedPermutation {
    pub fn identity(n: usize) -> Self {
        Self((0..n).map(|i| (i, 1.0)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks that the map is a signed bijection and an involution.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let mut seen = vec![false; n];
        for &(src, sign) in &self.0 {
            if src >= n || seen[src] || (sign != 1.0 && sign != -1.0) {
                return Err(Error::Config(format!(
                    "symmetry map {:?} is not a signed permutation",
                    self.0
                )));
            }
            seen[src] = true;
        }
        let probe: Vec<f32> = (0..n).map(|i| i as f32 + 1.0).collect();
        if self.apply(&self.apply(&probe)) != probe {
            return Err(Error::Config(format!(
                "symmetry map {:?} is not an involution",
                self.0
            )));
        }
        Ok(())
    }

    pub fn apply(&self, row: &[f32]) -> Vec<f32> {
        self.0.iter().map(|&(src, sign)| sign * row[src]).collect()
    }

    /// Applies the map to every row of a row-major matrix.
    pub fn apply_rows(&self, t: &Tensor) -> Result<Tensor> {
        if t.shape().len() != 2 || t.row_width() != self.len() {
            return Err(Error::Shape(format!(
                "mirror of width {} applied to {:?}",
                self.len(),
                t.shape()
            )));
        }
        let data = (0..t.rows()).flat_map(|r| self.apply(t.row(r))).collect();
        Tensor::new(t.shape().to_vec(), data)
    }

    /// Matrix `P` with `x P == apply(x)` for a row vector `x`.
    fn matrix(&self) -> Tensor {
        let n = self.len();
        let mut m = vec![0.0; n * n];
        for (j, &(src, sign)) in self.0.iter().enumerate() {
            m[src * n + j] = sign;
        }
        Tensor::matrix(n, n, m).expect("non-empty permutation")
    }
}

fn default_weight() -> f32 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymmetrySpec {
    pub obs: BTreeMap<String, SignedPermutation>,
    pub action: SignedPermutation,
    #[serde(default)]
    pub use_augmentation: bool,
    #[serde(default)]
    pub use_loss: bool,
    #[serde(default = "default_weight")]
    pub weight: f32,
}

impl SymmetrySpec {
    pub fn identity(schema: &[(String, usize)], action_dim: usize) -> Self {
        Self {
            obs: schema
                .iter()
                .map(|(g, w)| (g.clone(), SignedPermutation::identity(*w)))
                .collect(),
            action: SignedPermutation::identity(action_dim),
            use_augmentation: true,
            use_loss: true,
            weight: default_weight(),
        }
    }

    /// Left-right mirror of the pendulum: `(cos θ, sin θ, θ̇) ↦ (cos θ, -sin θ, -θ̇)`, `u ↦ -u`.
    pub fn pendulum() -> Self {
        Self {
            obs: BTreeMap::from([(
                POLICY.to_string(),
                SignedPermutation(vec![(0, 1.0), (1, -1.0), (2, -1.0)]),
            )]),
            action: SignedPermutation(vec![(0, -1.0)]),
            use_augmentation: true,
            use_loss: true,
            weight: default_weight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) {
            return Err(Error::Config("symmetry weight must be >= 0".into()));
        }
        self.action.validate()?;
        self.obs.values().try_for_each(SignedPermutation::validate)
    }

    /// Checks coverage against an environment schema and action width.
    pub fn check_schema(&self, schema: &[(String, usize)], action_dim: usize) -> Result<()> {
        for (g, w) in schema {
            match self.obs.get(g) {
                Some(p) if p.len() == *w => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "symmetry map for `{g}` has width {}, group has {w}",
                        p.len()
                    )))
                }
                None => return Err(Error::Config(format!("no symmetry map for group `{g}`"))),
            }
        }
        if self.action.len() != action_dim {
            return Err(Error::Config(format!(
                "action symmetry map has width {}, actions have {action_dim}",
                self.action.len()
            )));
        }
        Ok(())
    }
}

pub fn mirror_obs(spec: &SymmetrySpec, obs: &ObservationSet) -> Result<ObservationSet> {
    let mut out = ObservationSet::new();
    for (g, t) in obs.iter() {
        let map = spec
            .obs
            .get(g)
            .ok_or_else(|| Error::Config(format!("no symmetry map for group `{g}`")))?;
        out.insert(g, map.apply_rows(t)?)?;
    }
    Ok(out)
}

pub fn mirror_actions(spec: &SymmetrySpec, actions: &Tensor) -> Result<Tensor> {
    spec.action.apply_rows(actions)
}

/// Appends mirrored copies of every sample. Old log-probabilities of the
/// copies are recomputed under `snapshot`.
pub fn augment_batch(
    batch: &Minibatch,
    spec: &SymmetrySpec,
    snapshot: &GaussianActorCritic,
) -> Result<Minibatch> {
    if snapshot.is_recurrent() {
        return Err(Error::Config("symmetry augmentation requires a feedforward policy".into()));
    }
    let obs_m = mirror_obs(spec, &batch.obs)?;
    let act_m = mirror_actions(spec, &batch.actions)?;
    let (lp_m, _, _) = snapshot.evaluate(&obs_m, &act_m, None)?;
    let rows = batch.actions.rows();
    let mut actions = batch.actions.data().to_vec();
    actions.extend_from_slice(act_m.data());
    let twice = |v: &[f32]| [v, v].concat();
    Ok(Minibatch {
        obs: ObservationSet::concat(&[&batch.obs, &obs_m])?,
        actions: Tensor::matrix(2 * rows, batch.actions.row_width(), actions)?,
        old_log_prob: [batch.old_log_prob.as_slice(), &lp_m].concat(),
        old_value: twice(&batch.old_value),
        advantages: twice(&batch.advantages),
        returns: twice(&batch.returns),
    })
}

/// Records `mean_b ‖μ(S_obs s_b) - S_act μ(s_b)‖²` on the tape.
pub fn symmetry_loss(
    tape: &mut Tape,
    vars: &[Var],
    policy: &GaussianActorCritic,
    obs: &ObservationSet,
    spec: &SymmetrySpec,
) -> Result<Var> {
    let mirrored = mirror_obs(spec, obs)?;
    let mu = policy.forward(tape, vars, obs, None)?.mean;
    let mu_m = policy.forward(tape, vars, &mirrored, None)?.mean;
    let p = tape.constant(spec.action.matrix());
    let s_mu = tape.matmul(mu, p)?;
    let d = tape.sub(mu_m, s_mu)?;
    let d2 = tape.square(d)?;
    let per = tape.sum_axes(d2, &[1])?;
    tape.mean(per)
}

/// Eager symmetry defect of the policy mean on `obs`.
pub fn symmetry_defect(
    policy: &GaussianActorCritic,
    obs: &ObservationSet,
    spec: &SymmetrySpec,
) -> Result<f32> {
    let mut tape = Tape::new();
    let vars = policy.params.register_const(&mut tape);
    let l = symmetry_loss(&mut tape, &vars, policy, obs, spec)?;
    Ok(tape.scalar_value(l))
}
