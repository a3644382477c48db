use super::{Minibatch, PpoConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{GaussianActorCritic, Heads};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss: f32,
    pub surrogate_loss: f32,
    pub value_loss: f32,
    pub entropy: f32,
    pub approx_kl: f32,
    pub clip_fraction: f32,
}

impl LossStats {
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("loss", self.loss),
            ("surrogate_loss", self.surrogate_loss),
            ("value_loss", self.value_loss),
            ("entropy", self.entropy),
            ("approx_kl", self.approx_kl),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { stat: name.into() });
            }
        }
        Ok(())
    }
}

/// Clipped-surrogate PPO loss on already computed heads whose rows line up
/// with `mb`.
pub fn ppo_loss_from_heads(
    tape: &mut Tape,
    vars: &[Var],
    policy: &GaussianActorCritic,
    heads: &Heads,
    mb: &Minibatch,
    cfg: &PpoConfig,
) -> Result<(Var, LossStats)> {
    let n = mb.len();
    if tape.shape(heads.value) != [n] || mb.advantages.len() != n || mb.returns.len() != n {
        return Err(Error::Shape(format!(
            "minibatch of {n} samples against heads {:?}",
            tape.shape(heads.value)
        )));
    }
    let eps = cfg.clip_ratio;
    let actions = tape.constant(mb.actions.clone());
    let lp = policy.log_prob(tape, vars, heads.mean, actions)?;
    let old_lp = tape.constant(Tensor::vector(mb.old_log_prob.clone())?);
    let adv = tape.constant(Tensor::vector(mb.advantages.clone())?);
    let ret = tape.constant(Tensor::vector(mb.returns.clone())?);

    let log_ratio = tape.sub(lp, old_lp)?;
    let ratio = tape.exp(log_ratio)?;
    let surr1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps)?;
    let surr2 = tape.mul(clipped, adv)?;
    let surr = tape.minimum(surr1, surr2)?;
    let surr_mean = tape.mean(surr)?;
    let surrogate = tape.neg(surr_mean)?;

    let v_err = tape.sub(heads.value, ret)?;
    let v_sq = tape.square(v_err)?;
    let v_loss = if cfg.clip_value_loss {
        let old_v = tape.constant(Tensor::vector(mb.old_value.clone())?);
        let dv = tape.sub(heads.value, old_v)?;
        let dv = tape.clamp(dv, -eps, eps)?;
        let v_clip = tape.add(old_v, dv)?;
        let c_err = tape.sub(v_clip, ret)?;
        let c_sq = tape.square(c_err)?;
        let worst = tape.maximum(v_sq, c_sq)?;
        tape.mean(worst)?
    } else {
        tape.mean(v_sq)?
    };
    let entropy = policy.entropy(tape, vars)?;

    let wv = tape.scale(v_loss, cfg.value_coef)?;
    let we = tape.scale(entropy, cfg.entropy_coef)?;
    let loss = tape.add(surrogate, wv)?;
    let loss = tape.sub(loss, we)?;

    let (mut kl, mut clip_count) = (0.0f64, 0usize);
    for (&lr, &r) in tape.value(log_ratio).iter().zip(tape.value(ratio)) {
        kl += (r - 1.0 - lr) as f64;
        if (r - 1.0).abs() > eps {
            clip_count += 1;
        }
    }
    let stats = LossStats {
        loss: tape.scalar_value(loss),
        surrogate_loss: tape.scalar_value(surrogate),
        value_loss: tape.scalar_value(v_loss),
        entropy: tape.scalar_value(entropy),
        approx_kl: (kl / n as f64) as f32,
        clip_fraction: clip_count as f32 / n as f32,
    };
    stats.check_finite()?;
    Ok((loss, stats))
}

/// Feedforward PPO loss on a flat minibatch.
pub fn ppo_loss(
    tape: &mut Tape,
    vars: &[Var],
    policy: &GaussianActorCritic,
    mb: &Minibatch,
    cfg: &PpoConfig,
) -> Result<(Var, LossStats)> {
    let heads = policy.forward(tape, vars, &mb.obs, None)?;
    ppo_loss_from_heads(tape, vars, policy, &heads, mb, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ObservationSet, POLICY};
    use crate::nn::NetworkConfig;
    use crate::rng::{Domain, Streams};
    use proptest::prelude::*;

    fn setup(n: usize, seed: u64) -> (GaussianActorCritic, Minibatch) {
        let cfg = NetworkConfig {
            hidden_sizes: vec![8],
            ..NetworkConfig::default()
        };
        let net = GaussianActorCritic::new(&cfg, &[(POLICY.into(), 2)], 1, seed).unwrap();
        let s = Streams::new(seed);
        let obs = ObservationSet::new()
            .with(POLICY, Tensor::matrix(n, 2, s.normals(Domain::Init, 10, 0, 2 * n)).unwrap())
            .unwrap();
        let actions = Tensor::matrix(n, 1, s.normals(Domain::Init, 11, 0, n)).unwrap();
        let (lp, _, v) = net.evaluate(&obs, &actions, None).unwrap();
        let mb = Minibatch {
            obs,
            actions,
            old_log_prob: lp,
            old_value: v,
            advantages: s.normals(Domain::Init, 12, 0, n),
            returns: s.normals(Domain::Init, 13, 0, n),
        };
        (net, mb)
    }

    fn eval(net: &GaussianActorCritic, mb: &Minibatch, cfg: &PpoConfig) -> LossStats {
        let mut tape = Tape::new();
        let vars = net.params.register_const(&mut tape);
        ppo_loss(&mut tape, &vars, net, mb, cfg).unwrap().1
    }

    #[test]
    fn identical_policies_give_unit_ratio() {
        let (net, mb) = setup(16, 0);
        let s = eval(&net, &mb, &PpoConfig::default());
        let mean_adv = mb.advantages.iter().sum::<f32>() / 16.0;
        assert!((s.surrogate_loss + mean_adv).abs() < 1e-6);
        assert_eq!(s.approx_kl, 0.0);
        assert_eq!(s.clip_fraction, 0.0);
    }

    #[test]
    fn single_sample_uses_clipped_branch() {
        let (net, mut mb) = setup(1, 1);
        mb.advantages = vec![2.0];
        mb.old_log_prob[0] -= 1.5f32.ln();
        let s = eval(&net, &mb, &PpoConfig::default());
        assert!((s.surrogate_loss + 2.4).abs() < 1e-5, "{}", s.surrogate_loss);
        assert_eq!(s.clip_fraction, 1.0);
    }

    #[test]
    fn nan_advantage_faults() {
        let (net, mut mb) = setup(4, 2);
        mb.advantages[1] = f32::NAN;
        let mut tape = Tape::new();
        let vars = net.params.register_const(&mut tape);
        assert!(matches!(
            ppo_loss(&mut tape, &vars, &net, &mb, &PpoConfig::default()),
            Err(Error::NonFinite { .. })
        ));
    }

    /// Scalar restatement of the clipped surrogate for one sample.
    fn scalar_surrogate(ratio: f32, adv: f32, eps: f32) -> (f32, bool) {
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
        (unclipped.min(clipped), clipped < unclipped)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn surrogate_matches_scalar_oracle(seed in 0u64..10_000, shift in -0.5f32..0.5) {
            let (net, mut mb) = setup(12, seed);
            let offsets = Streams::new(seed).normals(Domain::Init, 14, 0, 12);
            for (lp, o) in mb.old_log_prob.iter_mut().zip(&offsets) {
                *lp += shift + 0.3 * o;
            }
            let cfg = PpoConfig::default();
            let (new_lp, _, _) = net.evaluate(&mb.obs, &mb.actions, None).unwrap();
            let ratios: Vec<f32> = new_lp.iter().zip(&mb.old_log_prob).map(|(n, o)| (n - o).exp()).collect();
            let mut flipped = mb.clone();
            flipped.advantages.iter_mut().for_each(|a| *a = -*a);
            for (batch, sign) in [(&mb, 1.0f32), (&flipped, -1.0)] {
                let s = eval(&net, batch, &cfg);
                let mut total = 0.0;
                for (r, a) in ratios.iter().zip(&mb.advantages) {
                    total += scalar_surrogate(*r, sign * a, cfg.clip_ratio).0;
                }
                prop_assert!((s.surrogate_loss + total / 12.0).abs() < 1e-5);
                prop_assert!(s.approx_kl >= -1e-6);
            }
            // Flipping advantages flips which side of the clip is active.
            for (r, a) in ratios.iter().zip(&mb.advantages) {
                if (r - 1.0).abs() > cfg.clip_ratio && *a != 0.0 {
                    let (_, pos) = scalar_surrogate(*r, *a, cfg.clip_ratio);
                    let (_, neg) = scalar_surrogate(*r, -*a, cfg.clip_ratio);
                    prop_assert_ne!(pos, neg);
                }
            }
        }
    }
}
