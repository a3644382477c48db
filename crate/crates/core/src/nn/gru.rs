use rand_chacha::ChaCha8Rng;

use super::mlp::uniform_fan_in;
use super::ParamSet;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const GATES: [&str; 3] = ["z", "r", "n"];

/// Gated recurrent cell:
///
/// ```text
/// z  = sigmoid(x·W_z + h·U_z + b_z)
/// r  = sigmoid(x·W_r + h·U_r + b_r)
/// n  = tanh(x·W_n + (r ⊙ h)·U_n + b_n)
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    input_dim: usize,
    hidden_dim: usize,
    /// `[w, u, b]` indices per gate, in `z, r, n` order.
    gates: [[usize; 3]; 3],
}

impl GruCell {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("GRU dimensions must be >= 1".into()));
        }
        let mut gates = [[0; 3]; 3];
        for (g, name) in GATES.iter().enumerate() {
            let w = uniform_fan_in(rng, input_dim, input_dim * hidden_dim);
            let u = uniform_fan_in(rng, hidden_dim, hidden_dim * hidden_dim);
            gates[g][0] = params.push(
                format!("{prefix}w_{name}"),
                Tensor::matrix(input_dim, hidden_dim, w)?.with_requires_grad(true),
            );
            gates[g][1] = params.push(
                format!("{prefix}u_{name}"),
                Tensor::matrix(hidden_dim, hidden_dim, u)?.with_requires_grad(true),
            );
            gates[g][2] = params.push(
                format!("{prefix}b_{name}"),
                Tensor::vector(vec![0.0; hidden_dim])?.with_requires_grad(true),
            );
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            gates,
        })
    }

    pub fn locate(params: &ParamSet, prefix: &str) -> Result<Self> {
        let mut gates = [[0; 3]; 3];
        for (g, name) in GATES.iter().enumerate() {
            for (k, kind) in ["w", "u", "b"].iter().enumerate() {
                let full = format!("{prefix}{kind}_{name}");
                gates[g][k] = params
                    .index_of(&full)
                    .ok_or_else(|| Error::Format(format!("missing parameter `{full}`")))?;
            }
        }
        let w = params.get(gates[0][0]).shape();
        Ok(Self {
            input_dim: w[0],
            hidden_dim: w[1],
            gates,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// One recurrence step for a batch: `x` is `[B × in]`, `h` is `[B × H]`.
    pub fn step(&self, tape: &mut Tape, vars: &[Var], x: Var, h: Var) -> Result<Var> {
        if tape.shape(x).get(1) != Some(&self.input_dim)
            || tape.shape(h).get(1) != Some(&self.hidden_dim)
        {
            return Err(Error::Shape(format!(
                "GRU step with x {:?}, h {:?}; expected widths {} and {}",
                tape.shape(x),
                tape.shape(h),
                self.input_dim,
                self.hidden_dim
            )));
        }
        let pre = |tape: &mut Tape, g: usize, hin: Var| -> Result<Var> {
            let [w, u, b] = self.gates[g];
            let xw = tape.matmul(x, vars[w])?;
            let hu = tape.matmul(hin, vars[u])?;
            let s = tape.add(xw, hu)?;
            tape.add(s, vars[b])
        };
        let z_pre = pre(tape, 0, h)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = pre(tape, 1, h)?;
        let r = tape.sigmoid(r_pre)?;
        let rh = tape.mul(r, h)?;
        let n_pre = pre(tape, 2, rh)?;
        let n = tape.tanh(n_pre)?;
        // h' = n + z ⊙ (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    /// Runs the cell over `xs` (one `[B × in]` per step). Before step `t`,
    /// rows with `reset_mask[t][b] == 1` have their hidden state zeroed.
    /// Returns the hidden state after every step.
    pub fn rollforward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        h0: Var,
        xs: &[Var],
        reset_mask: &[Vec<f32>],
    ) -> Result<Vec<Var>> {
        if xs.len() != reset_mask.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} reset-mask rows",
                xs.len(),
                reset_mask.len()
            )));
        }
        let batch = tape.shape(h0)[0];
        let mut h = h0;
        let mut out = Vec::with_capacity(xs.len());
        for (&x, mask) in xs.iter().zip(reset_mask) {
            if mask.len() != batch {
                return Err(Error::Shape(format!(
                    "reset mask of width {} for batch {batch}",
                    mask.len()
                )));
            }
            if mask.iter().any(|&m| m != 0.0) {
                let keep: Vec<f32> = mask.iter().map(|&m| 1.0 - m).collect();
                let keep = tape.constant_from(vec![batch, 1], keep)?;
                h = tape.mul(h, keep)?;
            }
            h = self.step(tape, vars, x, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Eager rollforward: `h0` is `[B × H]`, `xs` is `[T × B × in]`,
/// `reset_mask` is `[T × B]`. Returns `[T × B × H]`.
pub fn gru_rollforward(
    cell: &GruCell,
    params: &ParamSet,
    h0: &Tensor,
    xs: &Tensor,
    reset_mask: &Tensor,
) -> Result<Tensor> {
    let (xshape, mshape) = (xs.shape(), reset_mask.shape());
    if xshape.len() != 3 || mshape.len() != 2 || mshape != &xshape[..2] {
        return Err(Error::Shape(format!(
            "rollforward inputs {xshape:?} with mask {mshape:?}"
        )));
    }
    let (t_len, batch, width) = (xshape[0], xshape[1], xshape[2]);
    if h0.shape() != [batch, cell.hidden_dim] {
        return Err(Error::Shape(format!(
            "initial hidden {:?}, expected [{batch}, {}]",
            h0.shape(),
            cell.hidden_dim
        )));
    }
    let mut tape = Tape::new();
    let vars = params.register_const(&mut tape);
    let h = tape.constant(h0.clone());
    let mut inputs = Vec::with_capacity(t_len);
    let mut masks = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let slice = xs.data()[t * batch * width..(t + 1) * batch * width].to_vec();
        inputs.push(tape.constant_from(vec![batch, width], slice)?);
        masks.push(reset_mask.row(t).to_vec());
    }
    let hs = cell.rollforward(&mut tape, &vars, h, &inputs, &masks)?;
    let mut data = Vec::with_capacity(t_len * batch * cell.hidden_dim);
    for v in hs {
        data.extend_from_slice(tape.value(v));
    }
    Tensor::new(vec![t_len, batch, cell.hidden_dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, Streams};

    fn cell(input: usize, hidden: usize, seed: u64) -> (GruCell, ParamSet) {
        let mut p = ParamSet::new();
        let mut rng = Streams::new(seed).rng(Domain::Init, 0, 0);
        let c = GruCell::init(input, hidden, "gru.", &mut p, &mut rng).unwrap();
        (c, p)
    }

    fn seq(t: usize, b: usize, w: usize, seed: u64) -> Tensor {
        let v = Streams::new(seed).normals(Domain::Init, 9, 0, t * b * w);
        Tensor::new(vec![t, b, w], v).unwrap()
    }

    #[test]
    fn zero_everything_gives_zero_hidden() {
        let (c, mut p) = cell(2, 3, 0);
        let n = p.numel();
        p.load_flat(&vec![0.0; n]).unwrap();
        let mut tape = Tape::new();
        let vars = p.register_const(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![1, 2]).unwrap());
        let h = tape.constant(Tensor::zeros(vec![1, 3]).unwrap());
        let h1 = c.step(&mut tape, &vars, x, h).unwrap();
        assert_eq!(tape.value(h1), &[0., 0., 0.]);
    }

    #[test]
    fn all_resets_is_stateless() {
        let (c, p) = cell(2, 4, 1);
        let xs = seq(5, 3, 2, 2);
        let ones = Tensor::new(vec![5, 3], vec![1.0; 15]).unwrap();
        let h0 = Tensor::new(vec![3, 4], vec![0.7; 12]).unwrap();
        let full = gru_rollforward(&c, &p, &h0, &xs, &ones).unwrap();
        for t in 0..5 {
            let xt = Tensor::new(vec![1, 3, 2], xs.data()[t * 6..(t + 1) * 6].to_vec()).unwrap();
            let one = Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap();
            let single = gru_rollforward(&c, &p, &h0, &xt, &one).unwrap();
            assert_eq!(&full.data()[t * 12..(t + 1) * 12], single.data());
        }
    }

    #[test]
    fn split_at_reset_matches_independent_halves() {
        let (c, p) = cell(3, 5, 4);
        let xs = seq(6, 2, 3, 5);
        let mut mask = vec![0.0; 12];
        mask[3 * 2] = 1.0;
        mask[3 * 2 + 1] = 1.0;
        let mask = Tensor::new(vec![6, 2], mask).unwrap();
        let h0 = Tensor::zeros(vec![2, 5]).unwrap();
        let full = gru_rollforward(&c, &p, &h0, &xs, &mask).unwrap();
        let second = Tensor::new(vec![3, 2, 3], xs.data()[18..].to_vec()).unwrap();
        let zeros = Tensor::zeros(vec![3, 2]).unwrap();
        let tail = gru_rollforward(&c, &p, &h0, &second, &zeros).unwrap();
        assert_eq!(&full.data()[30..], tail.data());
    }

    #[test]
    fn hidden_stays_bounded() {
        let (c, p) = cell(2, 6, 8);
        let xs = seq(20, 4, 2, 9);
        let h0 = Tensor::zeros(vec![4, 6]).unwrap();
        let out = gru_rollforward(&c, &p, &h0, &xs, &Tensor::zeros(vec![20, 4]).unwrap()).unwrap();
        assert!(out.data().iter().all(|v| v.abs() <= 1.0));
    }
}
