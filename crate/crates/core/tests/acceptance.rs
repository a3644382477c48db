//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --release --test acceptance -- 4 9`.

mod common;

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pocketrl::autodiff::Tensor;
use pocketrl::distill::{collect_and_relabel, distill_loss, DistillConfig, Distiller, LossKind, LqrExpert};
use pocketrl::distributed::{MsgType, WireMessage};
use pocketrl::env::{lqr_oracle, make_env, EnvConfig, EnvName, LqrWeights, ObservationSet, POLICY};
use pocketrl::extensions::{symmetry_defect, RndConfig, SymmetrySpec};
use pocketrl::nn::{ActMode, GaussianActorCritic, NetworkConfig};
use pocketrl::ppo::{gae, PpoConfig, RolloutState};
use pocketrl::runner::{
    evaluate_policy, run_training, AlgoConfig, Checkpoint, EvalReport, ExportedPolicy, RunConfig, Trainer,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "gradient correctness", gradients),
    (2, "gae oracle equivalence", gae_oracle),
    (3, "timeout bootstrapping", timeout_bootstrap),
    (4, "ppo learns lqr", ppo_lqr),
    (5, "pendulum swing-up", pendulum),
    (6, "symmetry", symmetry),
    (7, "rnd exploration", rnd_chain),
    (8, "recurrence", recurrence),
    (9, "distillation", distillation),
    (10, "distributed equivalence", distributed),
    (11, "determinism and formats", formats),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {name}: {verdict} ({}; {:.1}s)",
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        std::io::stdout().flush().unwrap();
        if !o.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn ppo_config(name: EnvName, iterations: usize, seed: u64, ppo: PpoConfig) -> RunConfig {
    let mut cfg = common::ppo_run(name, 64, iterations, ppo);
    cfg.seed = seed;
    cfg
}

fn train(cfg: &RunConfig) -> Trainer {
    let mut t = Trainer::single_process(cfg.clone()).unwrap();
    while (t.iteration as usize) < cfg.max_iterations {
        t.step().unwrap();
    }
    t
}

fn eval(policy: &GaussianActorCritic, cfg: &RunConfig, episodes: usize) -> EvalReport {
    evaluate_policy(policy, cfg, episodes, true, 12_345).unwrap()
}

/// Runs seeds `0..total` until `need` have passed or too many have failed.
fn seeds(need: usize, total: u64, mut run: impl FnMut(u64) -> (bool, String)) -> (bool, String) {
    let (mut passed, mut notes) = (0, Vec::new());
    for seed in 0..total {
        let (ok, note) = run(seed);
        passed += ok as usize;
        notes.push(format!("seed {seed}: {note}"));
        let remaining = (total - seed - 1) as usize;
        if passed >= need || passed + remaining < need {
            break;
        }
    }
    (passed >= need, format!("{passed} of {} seeds run passed, need {need}; {}", notes.len(), notes.join(", ")))
}

// ---------------------------------------------------------------- 1

mod grad {
    use pocketrl::autodiff::{Tape, Tensor, UnaryOp, Var};
    use pocketrl::nn::{Activation, GruCell, Mlp, MlpSpec, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[derive(Clone, Copy, Debug)]
    enum Loss {
        Mse,
        GaussianNll,
        Clipped,
        Smooth,
    }

    pub struct Composition {
        xs: Vec<Tensor>,
        h0: Option<Tensor>,
        target: Tensor,
        adv: Vec<f32>,
        old_lp: Vec<f32>,
        loss: Loss,
        activation: Activation,
        layers: usize,
        mlp: Mlp,
        gru: Option<GruCell>,
        pub params: ParamSet,
    }

    fn uniform(rng: &mut ChaCha8Rng, n: usize, a: f32) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-a..a)).collect()
    }

    impl Composition {
        pub fn random(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = rng.random_range(2..=5);
            let in_dim = rng.random_range(1..=4);
            let out = rng.random_range(1..=3);
            let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(2..=6)).collect();
            let activation = [Activation::Tanh, Activation::Elu, Activation::Relu][rng.random_range(0..3)];
            let loss = [Loss::Mse, Loss::GaussianNll, Loss::Clipped, Loss::Smooth][(seed % 4) as usize];
            let steps = if rng.random_bool(0.4) { rng.random_range(2..=3) } else { 0 };
            let mut params = ParamSet::new();
            let (gru, mlp_in) = if steps > 0 {
                let h = rng.random_range(2..=4);
                (Some(GruCell::init(in_dim, h, "gru.", &mut params, &mut rng).unwrap()), h)
            } else {
                (None, in_dim)
            };
            let spec = MlpSpec {
                input_dim: mlp_in,
                hidden_sizes: hidden.clone(),
                activation,
                output_dim: out,
            };
            let mlp = Mlp::init(&spec, "mlp.", &mut params, &mut rng, 1.0).unwrap();
            if let Loss::GaussianNll = loss {
                params.push("log_std", Tensor::vector(uniform(&mut rng, out, 0.5)).unwrap().with_requires_grad(true));
            }
            // Random biases too, so every parameter matters.
            params.update_each(|_, v| *v = rng.random_range(-0.9..0.9));
            let xs = (0..steps.max(1))
                .map(|_| Tensor::matrix(batch, in_dim, uniform(&mut rng, batch * in_dim, 1.5)).unwrap())
                .collect();
            let h0 = gru
                .as_ref()
                .map(|g| Tensor::matrix(batch, g.hidden_dim(), uniform(&mut rng, batch * g.hidden_dim(), 0.8)).unwrap());
            let target = Tensor::matrix(batch, out, uniform(&mut rng, batch * out, 1.0)).unwrap();
            let adv = uniform(&mut rng, batch, 2.0);
            let mut c = Self {
                xs,
                h0,
                target,
                adv,
                old_lp: vec![0.0; batch],
                loss,
                activation,
                layers: hidden.len() + 1,
                mlp,
                gru,
                params,
            };
            if let Loss::Clipped = loss {
                // Old log-probabilities near the current ones so some ratios clip.
                let lp = c.log_probs64(&c.flat64());
                c.old_lp = lp.iter().map(|&v| (v + rng.random_range(-0.3..0.3)) as f32).collect();
            }
            c
        }

        pub fn describe(&self) -> String {
            format!("{:?}/{:?}/gru={}", self.loss, self.activation, self.gru.is_some())
        }

        fn forward(&self, tape: &mut Tape, vars: &[Var]) -> Var {
            let mut x = tape.constant(self.xs[0].clone());
            if let (Some(g), Some(h0)) = (&self.gru, &self.h0) {
                let mut h = tape.constant(h0.clone());
                for xt in &self.xs {
                    let xv = tape.constant(xt.clone());
                    h = g.step(tape, vars, xv, h).unwrap();
                }
                x = h;
            }
            let y = self.mlp.forward(tape, vars, x).unwrap();
            let t = tape.constant(self.target.clone());
            
            (|| -> pocketrl::Result<Var> {
                match self.loss {
                    Loss::Mse => {
                        let d = tape.sub(y, t)?;
                        let s = tape.square(d)?;
                        tape.mean(s)
                    }
                    Loss::GaussianNll => {
                        let ls = vars[self.params.index_of("log_std").unwrap()];
                        let d = tape.sub(t, y)?;
                        let sd = tape.exp(ls)?;
                        let z = tape.div(d, sd)?;
                        let z2 = tape.square(z)?;
                        let half = tape.scale(z2, 0.5)?;
                        let s = tape.add(half, ls)?;
                        let per = tape.sum_axes(s, &[1])?;
                        tape.mean(per)
                    }
                    Loss::Clipped => {
                        let d = tape.sub(t, y)?;
                        let d2 = tape.square(d)?;
                        let s = tape.sum_axes(d2, &[1])?;
                        let lp = tape.scale(s, -0.5)?;
                        let old = tape.constant(Tensor::vector(self.old_lp.clone())?);
                        let diff = tape.sub(lp, old)?;
                        let ratio = tape.exp(diff)?;
                        let adv = tape.constant(Tensor::vector(self.adv.clone())?);
                        let s1 = tape.mul(ratio, adv)?;
                        let rc = tape.clamp(ratio, 0.8, 1.2)?;
                        let s2 = tape.mul(rc, adv)?;
                        let m = tape.minimum(s1, s2)?;
                        let mean = tape.mean(m)?;
                        tape.neg(mean)
                    }
                    Loss::Smooth => {
                        let sp = tape.unary(UnaryOp::Softplus, y)?;
                        let sp1 = tape.shift(sp, 1.0)?;
                        let l = tape.log(sp1)?;
                        let sg = tape.sigmoid(t)?;
                        let p = tape.mul(l, sg)?;
                        let th = tape.tanh(y)?;
                        let mx = tape.maximum(th, t)?;
                        let q = tape.square(mx)?;
                        let sum = tape.add(p, q)?;
                        tape.mean(sum)
                    }
                }
            })()
            .unwrap()
        }

        pub fn loss32(&self, params: &ParamSet) -> f32 {
            let mut tape = Tape::new();
            let vars = params.register_const(&mut tape);
            let l = self.forward(&mut tape, &vars);
            tape.scalar_value(l)
        }

        pub fn analytic(&self) -> Vec<f32> {
            let mut params = self.params.clone();
            params.zero_grad();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let l = self.forward(&mut tape, &vars);
            params.backward(&mut tape, l, &vars).unwrap();
            params.flat_grads()
        }

        pub fn flat64(&self) -> Vec<f64> {
            self.params.flat_values().iter().map(|&v| v as f64).collect()
        }

        /// `(offset, shape)` of a named parameter in the flat vector.
        fn slot(&self, name: &str) -> (usize, Vec<usize>) {
            let mut off = 0;
            for (n, t) in self.params.names().iter().zip(self.params.tensors()) {
                if n == name {
                    return (off, t.shape().to_vec());
                }
                off += t.numel();
            }
            panic!("no parameter {name}");
        }

        fn matmul_bias(&self, x: &[Vec<f64>], flat: &[f64], w: &str, b: Option<&str>) -> Vec<Vec<f64>> {
            let (wo, ws) = self.slot(w);
            let (k, n) = (ws[0], ws[1]);
            let bias = b.map(|b| self.slot(b).0);
            x.iter()
                .map(|row| {
                    (0..n)
                        .map(|j| {
                            let s: f64 = (0..k).map(|i| row[i] * flat[wo + i * n + j]).sum();
                            s + bias.map_or(0.0, |bo| flat[bo + j])
                        })
                        .collect()
                })
                .collect()
        }

        fn outputs64(&self, flat: &[f64]) -> Vec<Vec<f64>> {
            let rows = |t: &Tensor| -> Vec<Vec<f64>> {
                t.data().chunks(t.shape()[1]).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
            };
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let mut x = rows(&self.xs[0]);
            if let Some(h0) = &self.h0 {
                let mut h = rows(h0);
                for xt in &self.xs {
                    let xr = rows(xt);
                    let gate = |g: &str, hin: &[Vec<f64>]| -> Vec<Vec<f64>> {
                        let a = self.matmul_bias(&xr, flat, &format!("gru.w_{g}"), Some(&format!("gru.b_{g}")));
                        let b = self.matmul_bias(hin, flat, &format!("gru.u_{g}"), None);
                        a.iter().zip(&b).map(|(p, q)| p.iter().zip(q).map(|(u, v)| u + v).collect()).collect()
                    };
                    let z: Vec<Vec<f64>> = gate("z", &h).into_iter().map(|r| r.into_iter().map(sig).collect()).collect();
                    let r: Vec<Vec<f64>> = gate("r", &h).into_iter().map(|r| r.into_iter().map(sig).collect()).collect();
                    let rh: Vec<Vec<f64>> = r.iter().zip(&h).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v).collect()).collect();
                    let n: Vec<Vec<f64>> = gate("n", &rh).into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect();
                    h = (0..h.len())
                        .map(|i| (0..h[i].len()).map(|j| (1.0 - z[i][j]) * n[i][j] + z[i][j] * h[i][j]).collect())
                        .collect();
                }
                x = h;
            }
            for l in 0..self.layers {
                x = self.matmul_bias(&x, flat, &format!("mlp.{l}.weight"), Some(&format!("mlp.{l}.bias")));
                if l + 1 < self.layers {
                    let act = |v: f64| match self.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                        Activation::Elu => v.max(0.0) + (-v.abs()).exp().ln_1p() - std::f64::consts::LN_2,
                    };
                    x = x.into_iter().map(|r| r.into_iter().map(act).collect()).collect();
                }
            }
            x
        }

        fn targets64(&self) -> Vec<Vec<f64>> {
            let t = &self.target;
            t.data().chunks(t.shape()[1]).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
        }

        fn log_probs64(&self, flat: &[f64]) -> Vec<f64> {
            let y = self.outputs64(flat);
            y.iter()
                .zip(self.targets64())
                .map(|(yr, tr)| -0.5 * yr.iter().zip(&tr).map(|(a, b)| (b - a).powi(2)).sum::<f64>())
                .collect()
        }

        pub fn loss64(&self, flat: &[f64]) -> f64 {
            let y = self.outputs64(flat);
            let t = self.targets64();
            let cells = || y.iter().zip(&t).flat_map(|(a, b)| a.iter().zip(b));
            let count = (y.len() * y[0].len()) as f64;
            match self.loss {
                Loss::Mse => cells().map(|(a, b)| (a - b).powi(2)).sum::<f64>() / count,
                Loss::GaussianNll => {
                    let (lo, _) = self.slot("log_std");
                    let per: f64 = y
                        .iter()
                        .zip(&t)
                        .map(|(a, b)| {
                            (0..a.len())
                                .map(|j| {
                                    let ls = flat[lo + j];
                                    0.5 * ((b[j] - a[j]) / ls.exp()).powi(2) + ls
                                })
                                .sum::<f64>()
                        })
                        .sum();
                    per / y.len() as f64
                }
                Loss::Clipped => {
                    let lp = self.log_probs64(flat);
                    let s: f64 = lp
                        .iter()
                        .enumerate()
                        .map(|(i, &l)| {
                            let ratio = (l - self.old_lp[i] as f64).exp();
                            let a = self.adv[i] as f64;
                            (ratio * a).min(ratio.clamp(0.8, 1.2) * a)
                        })
                        .sum();
                    -s / lp.len() as f64
                }
                Loss::Smooth => {
                    let sp = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
                    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
                    cells()
                        .map(|(a, b)| (sp(*a) + 1.0).ln() * sig(*b) + a.tanh().max(*b).powi(2))
                        .sum::<f64>()
                        / count
                }
            }
        }
    }

    impl Composition {
        /// True if f64 central differences at step `eps` disagree with a tiny
        /// step, i.e. a non-differentiable point lies within `eps`.
        pub fn kink_within(&self, eps: f64) -> bool {
            let base = self.flat64();
            let fd = |h: f64| -> Vec<f64> {
                (0..base.len())
                    .map(|k| {
                        let mut v = base.clone();
                        v[k] += h;
                        let up = self.loss64(&v);
                        v[k] -= 2.0 * h;
                        (up - self.loss64(&v)) / (2.0 * h)
                    })
                    .collect()
            };
            rel_err(&fd(1e-6), &fd(eps)) > 1e-3
        }
    }

    pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm(&diff) / norm(a).max(norm(b)).max(1e-6)
    }
}

fn gradients() -> Outcome {
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let (mut bad, mut redrawn, mut accepted) = (Vec::new(), 0, 0);
    let mut i = 0u64;
    while accepted < 100 {
        i += 1;
        let c = grad::Composition::random(1000 + i);
        // A kink within the f32 step makes central differences meaningless there.
        if c.kink_within(5e-3) {
            redrawn += 1;
            continue;
        }
        accepted += 1;
        let analytic: Vec<f64> = c.analytic().iter().map(|&g| g as f64).collect();
        let base = c.params.flat_values();
        let eps32 = 5e-3f32;
        let mut fd32 = Vec::with_capacity(base.len());
        let mut probe = c.params.clone();
        for k in 0..base.len() {
            let mut v = base.clone();
            v[k] = base[k] + eps32;
            probe.load_flat(&v).unwrap();
            let up = c.loss32(&probe);
            v[k] = base[k] - eps32;
            probe.load_flat(&v).unwrap();
            let down = c.loss32(&probe);
            fd32.push(((up - down) / (2.0 * eps32)) as f64);
        }
        let base64 = c.flat64();
        let eps64 = 1e-6;
        let fd64: Vec<f64> = (0..base64.len())
            .map(|k| {
                let mut v = base64.clone();
                v[k] += eps64;
                let up = c.loss64(&v);
                v[k] -= 2.0 * eps64;
                (up - c.loss64(&v)) / (2.0 * eps64)
            })
            .collect();
        let e32 = grad::rel_err(&analytic, &fd32);
        let e64 = grad::rel_err(&analytic, &fd64);
        worst32 = worst32.max(e32);
        worst64 = worst64.max(e64);
        if e32 > 1e-2 || e64 > 1e-4 {
            bad.push(format!("#{i} {} e32={e32:.2e} e64={e64:.2e}", c.describe()));
        }
    }
    Outcome::new(
        bad.is_empty(),
        format!(
            "100 compositions ({redrawn} redrawn for a kink within the step); worst relative error {worst32:.2e} vs f32 central differences (tol 1e-2), {worst64:.2e} vs f64 shadow (tol 1e-4){}",
            if bad.is_empty() { String::new() } else { format!("; failures: {}", bad.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn gae_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t_len = rng.random_range(1..=8);
        let b_len = rng.random_range(1..=4);
        let gamma: f32 = rng.random_range(0.8..1.0);
        let lambda: f32 = rng.random_range(0.5..=1.0);
        let mut grid = |f: &mut dyn FnMut(&mut ChaCha8Rng) -> f32| -> Vec<Vec<f32>> {
            (0..t_len).map(|_| (0..b_len).map(|_| f(&mut rng)).collect()).collect()
        };
        let rewards = grid(&mut |r| r.random_range(-2.0..2.0));
        let values = grid(&mut |r| r.random_range(-2.0..2.0));
        let dones: Vec<Vec<bool>> = grid(&mut |r| r.random_bool(0.25) as u8 as f32)
            .into_iter()
            .map(|row| row.into_iter().map(|d| d == 1.0).collect())
            .collect();
        let bootstrap: Vec<f32> = (0..b_len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (adv, ret) = gae(&rewards, &values, &dones, &bootstrap, gamma, lambda);
        // Brute force: per env, per episode segment, explicit discounted sum of TD errors.
        let (g, l) = (gamma as f64, lambda as f64);
        for b in 0..b_len {
            let mut start = 0;
            while start < t_len {
                let mut end = start;
                while end + 1 < t_len && !dones[end][b] {
                    end += 1;
                }
                let delta = |k: usize| {
                    let next = if dones[k][b] {
                        0.0
                    } else if k + 1 < t_len {
                        values[k + 1][b] as f64
                    } else {
                        bootstrap[b] as f64
                    };
                    rewards[k][b] as f64 + g * next - values[k][b] as f64
                };
                for t in start..=end {
                    let a: f64 = (t..=end).map(|k| (g * l).powi((k - t) as i32) * delta(k)).sum();
                    let i = t * b_len + b;
                    worst = worst.max((adv[i] as f64 - a).abs());
                    worst = worst.max((ret[i] as f64 - (a + values[t][b] as f64)).abs());
                }
                start = end + 1;
            }
        }
    }
    Outcome::new(
        worst <= 1e-6,
        format!("1000 random buffers (T<=8, B<=4); max abs deviation {worst:.2e} (tol 1e-6)"),
    )
}

// ---------------------------------------------------------------- 3

fn value_at_constant_obs(bootstrap: bool) -> f32 {
    let ppo = PpoConfig {
        lambda: 1.0,
        rollout_horizon: 50,
        clip_value_loss: false,
        bootstrap_timeouts: bootstrap,
        ..PpoConfig::default()
    };
    let mut cfg = ppo_config(EnvName::ConstantReward, 100, 0, ppo);
    cfg.env.overrides.random_init_counters = false;
    let t = train(&cfg);
    let obs = ObservationSet::new()
        .with(POLICY, Tensor::matrix(1, 1, vec![1.0]).unwrap())
        .unwrap();
    t.learner.policy.act(&obs, None, ActMode::Mean, None).unwrap().value[0]
}

fn timeout_bootstrap() -> Outcome {
    let with = value_at_constant_obs(true);
    let without = value_at_constant_obs(false);
    Outcome::new(
        (with - 100.0).abs() <= 10.0 && without < 25.0,
        format!("V after 100 iterations: {with:.2} with bootstrapping (target 100+-10), {without:.2} without (target < 25)"),
    )
}

// ---------------------------------------------------------------- 4

fn ppo_lqr() -> Outcome {
    let oracle = lqr_oracle(0.05, LqrWeights::default(), 200, 0.99, 256, 12_345).unwrap();
    let star = oracle.mean_return;
    let (pass, detail) = seeds(4, 5, |seed| {
        let cfg = ppo_config(EnvName::PointMass, 300, seed, PpoConfig::default());
        let t = train(&cfg);
        let r = eval(&t.learner.policy, &cfg, 256).mean_return;
        let ok = (r - star).abs() <= 0.10 * star.abs();
        (ok, format!("{r:.3} ({:.3}x)", r / star))
    });
    Outcome::new(pass, format!("lqr return {star:.3}; {detail}"))
}

// ---------------------------------------------------------------- 5, 6

fn pendulum_ppo() -> PpoConfig {
    PpoConfig {
        gamma: 0.95,
        clip_value_loss: false,
        ..PpoConfig::default()
    }
}

fn pendulum() -> Outcome {
    let (pass, detail) = seeds(4, 5, |seed| {
        let cfg = ppo_config(EnvName::Pendulum, 300, seed, pendulum_ppo());
        let r = eval(&train(&cfg).learner.policy, &cfg, 256).mean_return;
        (r >= -300.0, format!("{r:.1}"))
    });
    Outcome::new(pass, format!("threshold -300; {detail}"))
}

fn random_pendulum_states(n: usize) -> ObservationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let th: f32 = rng.random_range(-std::f32::consts::PI..std::f32::consts::PI);
        data.extend([th.cos(), th.sin(), rng.random_range(-8.0..8.0)]);
    }
    ObservationSet::new()
        .with(POLICY, Tensor::matrix(n, 3, data).unwrap())
        .unwrap()
}

fn symmetry() -> Outcome {
    let spec = SymmetrySpec::pendulum();
    let plain_cfg = ppo_config(EnvName::Pendulum, 300, 0, pendulum_ppo());
    let mut sym_cfg = plain_cfg.clone();
    sym_cfg.extensions.symmetry = Some(spec.clone());

    let mut plain = Trainer::single_process(plain_cfg.clone()).unwrap();
    let mut sym = Trainer::single_process(sym_cfg.clone()).unwrap();
    let base = plain.step().unwrap().stats.minibatch_size;
    let doubled = sym.step().unwrap().stats.minibatch_size;
    while (plain.iteration as usize) < plain_cfg.max_iterations {
        plain.step().unwrap();
    }
    while (sym.iteration as usize) < sym_cfg.max_iterations {
        sym.step().unwrap();
    }
    let states = random_pendulum_states(10_000);
    let d_plain = symmetry_defect(&plain.learner.policy, &states, &spec).unwrap();
    let d_sym = symmetry_defect(&sym.learner.policy, &states, &spec).unwrap();
    let r = eval(&sym.learner.policy, &sym_cfg, 256).mean_return;
    let a = doubled == 2 * base;
    let b = d_sym * 10.0 <= d_plain;
    let c = r >= -300.0;
    Outcome::new(
        a && b && c,
        format!(
            "minibatch {base} -> {doubled}; defect {d_sym:.4} vs {d_plain:.4} without ({:.1}x smaller); return {r:.1}",
            d_plain / d_sym
        ),
    )
}

// ---------------------------------------------------------------- 7

const CHAIN_BUDGET: usize = 2_000_000;

fn chain_config(seed: u64, rnd: bool) -> RunConfig {
    let ppo = PpoConfig {
        entropy_coef: 0.0,
        ..PpoConfig::default()
    };
    let iterations = CHAIN_BUDGET / (64 * ppo.rollout_horizon);
    let mut cfg = ppo_config(EnvName::SparseChain, iterations, seed, ppo);
    cfg.network = NetworkConfig {
        value_init_scale: 0.0,
        ..NetworkConfig::default()
    };
    if rnd {
        cfg.extensions.rnd = Some(RndConfig::default());
    }
    cfg
}

/// Trains within the step budget, evaluating every `every` iterations;
/// returns the first evaluation success rate reaching `stop`, else the last.
fn chain_run(cfg: &RunConfig, every: usize, stop: f32) -> (f32, u64, f32) {
    let mut t = Trainer::single_process(cfg.clone()).unwrap();
    let mut train_success = (0.0f32, 0.0f32);
    let mut sr = 0.0;
    while (t.iteration as usize) < cfg.max_iterations {
        let rep = t.step().unwrap();
        let e = rep.episodes;
        train_success.0 += e.success_count;
        train_success.1 += e.count;
        if (t.iteration as usize).is_multiple_of(every) || t.iteration as usize == cfg.max_iterations {
            sr = eval(&t.learner.policy, cfg, 256).success_rate.unwrap();
            if sr >= stop {
                break;
            }
        }
    }
    (sr, t.total_env_steps, train_success.0 / train_success.1.max(1.0))
}

fn rnd_chain() -> Outcome {
    let plain_cfg = chain_config(0, false);
    let (plain_sr, plain_steps, plain_train) = chain_run(&plain_cfg, plain_cfg.max_iterations, 2.0);
    let plain_ok = plain_sr < 0.05 && plain_train < 0.05;
    let (pass, detail) = seeds(4, 5, |seed| {
        let (sr, steps, _) = chain_run(&chain_config(seed, true), 50, 0.8);
        (sr >= 0.8, format!("{:.0}% after {steps} steps", sr * 100.0))
    });
    Outcome::new(
        plain_ok && pass,
        format!(
            "plain ppo success {:.1}% eval, {:.1}% during training over {plain_steps} steps; rnd: {detail}",
            plain_sr * 100.0,
            plain_train * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 8

fn recurrence() -> Outcome {
    let run = |recurrent: bool| {
        let mut cfg = ppo_config(EnvName::MemoryRecall, 500, 0, PpoConfig::default());
        cfg.network.recurrent = recurrent;
        cfg.network.hidden_dim = 32;
        eval(&train(&cfg).learner.policy, &cfg, 256).success_rate.unwrap()
    };
    let rec = run(true);
    let ff = run(false);
    Outcome::new(
        rec >= 0.9 && ff <= 0.6,
        format!("reward rate {:.1}% recurrent (>= 90%), {:.1}% feedforward (<= 60%)", rec * 100.0, ff * 100.0),
    )
}

// ---------------------------------------------------------------- 9

fn distillation() -> Outcome {
    let expert = LqrExpert::point_mass().unwrap();
    let cfg = DistillConfig {
        learning_rate: 3e-3,
        ..DistillConfig::default()
    };
    let env_cfg = EnvConfig::new(EnvName::PointMass, 64);
    let mut env = make_env(&env_cfg, 64, 0).unwrap();
    let schema = env.spec().schema.clone();
    let student = GaussianActorCritic::new(&NetworkConfig::default(), &schema, 1, 0).unwrap();

    // Held-out expert states: expert-driven rollouts from unseen starts.
    let mut held_env = make_env(&env_cfg, 64, 0).unwrap();
    let mut st = RolloutState::new(held_env.as_mut(), &student, 777, 0);
    let held = collect_and_relabel(held_env.as_mut(), &student, &expert, 200, 1.0, ActMode::Mean, &mut st).unwrap();
    let (obs, targets) = (held.flat_obs().unwrap(), held.flat_targets().unwrap());

    let mut d = Distiller::new(env.as_mut(), student, &expert, cfg.clone(), 0, 0).unwrap();
    let mut mse = Vec::new();
    for _ in 0..50 {
        d.step().unwrap();
        mse.push(distill_loss(&d.student, &obs, &targets, LossKind::MseOnMean).unwrap());
    }
    let windows: Vec<f32> = mse.chunks(10).map(|w| w.iter().sum::<f32>() / w.len() as f32).collect();
    let monotone = windows.windows(2).all(|w| w[1] < w[0]);
    let student = d.student.clone();
    let rc = RunConfig::new(env_cfg, AlgoConfig::Distill(cfg), 50);
    let r = eval(&student, &rc, 256).mean_return;
    let star = lqr_oracle(0.05, LqrWeights::default(), 200, 0.99, 256, 12_345).unwrap().mean_return;
    let last = *mse.last().unwrap();
    let ok = (r - star).abs() <= 0.05 * star.abs() && last < 1e-2;
    Outcome::new(
        ok,
        format!(
            "student {r:.3} vs lqr {star:.3} ({:.3}x, within 5%); held-out action mse {last:.2e} (< 1e-2); 10-iteration window means {} decreasing={monotone}",
            r / star,
            windows.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 10

fn distributed() -> Outcome {
    // One iteration of 5 epochs x 2 minibatches: 10 optimizer steps.
    let ppo = PpoConfig {
        num_minibatches: 2,
        ..PpoConfig::default()
    };
    let single = common::train_local(&common::ppo_run(EnvName::PointMass, 64, 1, ppo.clone()), 1);
    let two = common::ppo_run(EnvName::PointMass, 32, 1, ppo);
    let a = common::train_tcp(&two, 2, 1);
    let b = common::train_tcp(&two, 2, 1);
    let diff = common::max_abs_diff(&single, &a[0]);
    let ranks_agree = common::bits(&a[0]) == common::bits(&a[1]);
    let repeat = common::bits(&a[0]) == common::bits(&b[0]);
    Outcome::new(
        diff <= 1e-5 && ranks_agree && repeat,
        format!("max abs diff {diff:.2e} after 10 steps (tol 1e-5); ranks identical={ranks_agree}; repeated runs bit-identical={repeat}"),
    )
}

// ---------------------------------------------------------------- 11

fn formats() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ppo_config(EnvName::Pendulum, 3, 7, PpoConfig::default());
    cfg.env.num_envs = 8;
    cfg.out_dir = dir.path().to_path_buf();
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    let o1 = run_training(cfg.clone()).unwrap();
    let (m1, c1) = (read(&o1.metrics), read(&o1.checkpoint));
    let o2 = run_training(cfg).unwrap();
    let reproducible = m1 == read(&o2.metrics) && c1 == read(&o2.checkpoint);

    let ckpt = Checkpoint::from_bytes(&c1).unwrap();
    let ckpt_rt = ckpt.to_bytes().unwrap() == c1;
    let schema = make_env(&ckpt.config.env, 1, 0).unwrap().spec().schema.clone();
    let exported = ExportedPolicy::from_params(&ckpt.params, ckpt.config.network.activation, schema).unwrap();
    let eb = exported.to_bytes().unwrap();
    let export_rt = ExportedPolicy::from_bytes(&eb).unwrap().to_bytes().unwrap() == eb;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let wire_rt = (0..1000).all(|_| {
        let t = MsgType::from_byte(rng.random_range(0..7)).unwrap();
        let payload = (0..rng.random_range(0..200)).map(|_| f32::from_bits(rng.random())).collect();
        let m = WireMessage::new(t, rng.random(), payload);
        let bytes = m.encode();
        WireMessage::decode(&bytes).unwrap().encode() == bytes
    });
    Outcome::new(
        reproducible && ckpt_rt && export_rt && wire_rt,
        format!(
            "repeated run byte-identical={reproducible}; checkpoint round trip={ckpt_rt}; export round trip={export_rt}; 1000 wire messages round trip={wire_rt}"
        ),
    )
}
