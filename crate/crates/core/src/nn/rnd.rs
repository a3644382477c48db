use super::{Mlp, MlpSpec, ParamSet};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{Domain, Streams};

/// Frozen random target network and trainable predictor mapping the same
/// input to a `k`-dimensional embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct RndPair {
    pub target: ParamSet,
    pub predictor: ParamSet,
    target_net: Mlp,
    predictor_net: Mlp,
}

impl RndPair {
    pub fn new(input_dim: usize, hidden: &[usize], embed_dim: usize, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(input_dim, hidden.to_vec(), embed_dim);
        let streams = Streams::new(seed);
        let mut target = ParamSet::new();
        let target_net = Mlp::init(&spec, "", &mut target, &mut streams.rng(Domain::Init, 2, 0), 1.0)?;
        target.set_trainable(false);
        let mut predictor = ParamSet::new();
        let predictor_net =
            Mlp::init(&spec, "", &mut predictor, &mut streams.rng(Domain::Init, 3, 0), 1.0)?;
        Ok(Self {
            target,
            predictor,
            target_net,
            predictor_net,
        })
    }

    pub fn from_params(target: ParamSet, mut predictor: ParamSet) -> Result<Self> {
        let target_net = Mlp::locate(&target, "", super::Activation::Tanh)?;
        let predictor_net = Mlp::locate(&predictor, "", super::Activation::Tanh)?;
        predictor.set_trainable(true);
        let mut target = target;
        target.set_trainable(false);
        Ok(Self {
            target,
            predictor,
            target_net,
            predictor_net,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.predictor_net.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.predictor_net.output_dim()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.row_width() != self.input_dim() {
            return Err(Error::Shape(format!(
                "RND input {:?}, expected width {}",
                x.shape(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `(target_out, pred_out)`, both `[B × k]`. Neither pass records
    /// gradients.
    pub fn embed(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(x)?;
        let mut tape = Tape::new();
        let tv = self.target.register_const(&mut tape);
        let pv = self.predictor.register_const(&mut tape);
        let xv = tape.constant(x.clone());
        let t = self.target_net.forward(&mut tape, &tv, xv)?;
        let p = self.predictor_net.forward(&mut tape, &pv, xv)?;
        Ok((tape.to_tensor(t), tape.to_tensor(p)))
    }

    /// Per-sample squared embedding error `‖f(x) - f̄(x)‖²`.
    pub fn errors(&self, x: &Tensor) -> Result<Vec<f32>> {
        let (t, p) = self.embed(x)?;
        let k = self.embed_dim();
        Ok(t.data()
            .chunks(k)
            .zip(p.data().chunks(k))
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum())
            .collect())
    }

    /// Records `mean_b ‖f(x_b) - f̄(x_b)‖²` with gradients flowing only into
    /// the predictor leaves `pvars`.
    pub fn loss(&self, tape: &mut Tape, pvars: &[Var], x: &Tensor) -> Result<Var> {
        self.check(x)?;
        let tv = self.target.register_const(tape);
        let xv = tape.constant(x.clone());
        let t = self.target_net.forward(tape, &tv, xv)?;
        let p = self.predictor_net.forward(tape, pvars, xv)?;
        let d = tape.sub(p, t)?;
        let d2 = tape.square(d)?;
        let per = tape.sum_axes(d2, &[1])?;
        tape.mean(per)
    }
}
