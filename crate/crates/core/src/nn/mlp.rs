use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::autodiff::{Tape, Tensor, UnaryOp, Var};
use crate::error::{Error, Result};
use crate::rng::{Domain, Streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    /// ELU-like: `softplus(x) - ln 2`, smooth and zero at the origin.
    Elu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_sizes: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_sizes,
            activation: Activation::Tanh,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_sizes.contains(&0) {
            return Err(Error::Config(format!("MLP dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden_sizes);
        d.push(self.output_dim);
        d
    }
}

/// Layer layout of a multilayer perceptron whose weights live in a
/// [`ParamSet`]. Weights are `[in × out]`, so a layer computes `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<(usize, usize)>,
    activation: Activation,
    input_dim: usize,
    output_dim: usize,
}

/// `n` draws uniform in `±sqrt(1/fan_in)`.
pub(crate) fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = (1.0 / fan_in as f32).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl Mlp {
    /// Appends freshly initialized layers to `params` under `prefix`.
    /// The last layer's weights are multiplied by `final_scale`.
    pub fn init(
        spec: &MlpSpec,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        final_scale: f32,
    ) -> Result<Self> {
        spec.validate()?;
        let dims = spec.dims();
        let mut layers = Vec::new();
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut w = uniform_fan_in(rng, fan_in, fan_in * fan_out);
            if l == dims.len() - 2 {
                w.iter_mut().for_each(|v| *v *= final_scale);
            }
            let wi = params.push(
                format!("{prefix}{l}.weight"),
                Tensor::matrix(fan_in, fan_out, w)?.with_requires_grad(true),
            );
            let bi = params.push(
                format!("{prefix}{l}.bias"),
                Tensor::vector(vec![0.0; fan_out])?.with_requires_grad(true),
            );
            layers.push((wi, bi));
        }
        Ok(Self {
            layers,
            activation: spec.activation,
            input_dim: spec.input_dim,
            output_dim: spec.output_dim,
        })
    }

    /// Rebuilds the layout from names already present in `params`.
    pub fn locate(params: &ParamSet, prefix: &str, activation: Activation) -> Result<Self> {
        let mut layers = Vec::new();
        for l in 0.. {
            let (Some(wi), Some(bi)) = (
                params.index_of(&format!("{prefix}{l}.weight")),
                params.index_of(&format!("{prefix}{l}.bias")),
            ) else {
                break;
            };
            layers.push((wi, bi));
        }
        let (first, last) = match (layers.first(), layers.last()) {
            (Some(f), Some(l)) => (f.0, l.0),
            _ => return Err(Error::Format(format!("no layers named `{prefix}*`"))),
        };
        Ok(Self {
            input_dim: params.get(first).shape()[0],
            output_dim: params.get(last).shape()[1],
            layers,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn hidden_sizes(&self, params: &ParamSet) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|&(w, _)| params.get(w).shape()[1])
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let width = tape.shape(x).get(1).copied();
        if tape.shape(x).len() != 2 || width != Some(self.input_dim) {
            return Err(Error::Shape(format!(
                "MLP expects [B × {}], got {:?}",
                self.input_dim,
                tape.shape(x)
            )));
        }
        let mut h = x;
        for (l, &(wi, bi)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, vars[wi])?;
            h = tape.add(z, vars[bi])?;
            if l + 1 < self.layers.len() {
                h = activate(tape, self.activation, h)?;
            }
        }
        Ok(h)
    }
}

pub(crate) fn activate(tape: &mut Tape, act: Activation, x: Var) -> Result<Var> {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.unary(UnaryOp::Relu, x),
        Activation::Elu => {
            let s = tape.unary(UnaryOp::Softplus, x)?;
            tape.shift(s, -std::f32::consts::LN_2)
        }
    }
}

/// Initializes a standalone MLP deterministically from `seed`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<(Mlp, ParamSet)> {
    let mut params = ParamSet::new();
    let mut rng = Streams::new(seed).rng(Domain::Init, 0, 0);
    let mlp = Mlp::init(spec, "", &mut params, &mut rng, 1.0)?;
    Ok((mlp, params))
}

/// Forward pass without gradient tracking.
pub fn mlp_forward(mlp: &Mlp, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register_const(&mut tape);
    let xv = tape.constant(x.clone());
    let y = mlp.forward(&mut tape, &vars, xv)?;
    Ok(tape.to_tensor(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let spec = MlpSpec::new(3, vec![8, 8], 2);
        let (_, a) = init_params(&spec, 11).unwrap();
        let (_, b) = init_params(&spec, 11).unwrap();
        let (_, c) = init_params(&spec, 12).unwrap();
        assert_eq!(a.flat_values(), b.flat_values());
        assert_ne!(a.flat_values(), c.flat_values());
    }

    #[test]
    fn first_layer_bound() {
        let spec = MlpSpec::new(100, vec![16], 1);
        let (_, p) = init_params(&spec, 3).unwrap();
        let w = p.by_name("0.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.1));
        assert!(p.by_name("0.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_hidden_layers_is_affine() {
        let spec = MlpSpec::new(2, vec![], 1);
        let (mlp, mut p) = init_params(&spec, 0).unwrap();
        p.load_flat(&[2.0, -1.0, 0.5]).unwrap();
        let x = Tensor::matrix(2, 2, vec![1., 1., 3., 0.]).unwrap();
        let y = mlp_forward(&mlp, &p, &x).unwrap();
        assert_eq!(y.data(), &[1.5, 6.5]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = MlpSpec::new(3, vec![5, 4], 2);
        let (mlp, mut p) = init_params(&spec, 0).unwrap();
        let n = p.numel();
        p.load_flat(&vec![0.0; n]).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.3, -2., 9.]).unwrap();
        assert_eq!(mlp_forward(&mlp, &p, &x).unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let spec = MlpSpec::new(3, vec![4], 1);
        let (mlp, p) = init_params(&spec, 0).unwrap();
        let x = Tensor::matrix(1, 2, vec![0., 0.]).unwrap();
        assert!(matches!(mlp_forward(&mlp, &p, &x), Err(Error::Shape(_))));
    }
}
