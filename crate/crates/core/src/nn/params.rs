use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, named parameter arrays. The order is the canonical one used by
/// checkpoints and by the gradient exchange between workers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.tensors
            .iter_mut()
            .for_each(|t| t.set_requires_grad(flag));
    }

    /// Records every tensor as a leaf, in order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Records every tensor as a constant, so no gradient flows to it.
    pub fn register_const(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone().with_requires_grad(false)))
            .collect()
    }

    /// Adds the gradients of a backward pass into the stored `grad` slots.
    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Runs `tape.backward(loss)` and accumulates into this set.
    pub fn backward(&mut self, tape: &mut Tape, loss: Var, vars: &[Var]) -> Result<()> {
        let grads = tape.backward(loss)?;
        self.accumulate(&grads, vars)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn flat_values(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "flat parameter vector of length {} for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Concatenated gradients; tensors without a gradient contribute zeros.
    pub fn flat_grads(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        out
    }

    /// Applies `f(value, grad_index)` to every scalar, in canonical order.
    pub fn update_each(&mut self, mut f: impl FnMut(usize, &mut f32)) {
        let mut i = 0;
        for t in &mut self.tensors {
            for v in t.data_mut() {
                f(i, v);
                i += 1;
            }
        }
    }

    /// Appends all of `other`'s entries, prefixing their names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (n, t) in other.names.iter().zip(&other.tensors) {
            self.push(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Keeps only entries whose name satisfies `keep`, preserving order.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            if keep(n) {
                out.push(n.clone(), t.clone());
            }
        }
        out
    }

    /// Copies values from `other` for every name present in both sets,
    /// requiring identical shapes.
    pub fn copy_matching(&mut self, other: &ParamSet) -> Result<()> {
        for (n, t) in other.names.iter().zip(&other.tensors) {
            if let Some(i) = self.index_of(n) {
                let dst = &mut self.tensors[i];
                if dst.shape() != t.shape() {
                    return Err(Error::Shape(format!(
                        "parameter `{n}` has shape {:?}, source {:?}",
                        dst.shape(),
                        t.shape()
                    )));
                }
                dst.data_mut().copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}
