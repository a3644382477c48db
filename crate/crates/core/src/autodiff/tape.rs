use super::kernels;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Square,
    Neg,
    Softplus,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Reduce {
        op: ReduceOp,
        x: Var,
        /// Reduced axes, sorted.
        axes: Vec<usize>,
    },
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, retrievable per leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to leaf `v`, or `None` when the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Single-use record of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers. Once [`Tape::backward`] has run, the tape refuses further use.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape` (row-major), the offset of the element of
/// `src_shape` it reads from under right-aligned broadcasting.
fn broadcast_offsets(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let src_n = numel(src_shape);
    if src_shape == out_shape {
        return (0..n).collect();
    }
    if src_n == 1 {
        return vec![0; n];
    }
    // Trailing-suffix broadcast, e.g. [B×A] against [A].
    let lead = out_shape.len() - src_shape.len();
    if out_shape[lead..] == *src_shape {
        return (0..n).map(|i| i % src_n).collect();
    }
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in (0..src_shape.len()).rev() {
        let oi = i + lead;
        strides[oi] = if src_shape[i] == 1 { 0 } else { s };
        s *= src_shape[i];
    }
    let mut idx = vec![0usize; rank];
    let mut offsets = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl UnaryOp {
    fn apply(self, x: f32) -> f32 {
        match self {
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Square => x * x,
            UnaryOp::Neg => -x,
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Relu => x.max(0.0),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Neg => -1.0,
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl BinaryOp {
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Min => a.min(b),
            BinaryOp::Max => a.max(b),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::State("tape already consumed by a backward pass".into()))
        } else {
            Ok(())
        }
    }

    /// Records `t` as a leaf. Its gradient is reported by `backward` when
    /// `t.requires_grad()` is set; otherwise it behaves as a constant.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let op = if t.requires_grad() { Op::Leaf } else { Op::Const };
        self.push(t.shape().to_vec(), t.data().to_vec(), op, t.requires_grad())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Const, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    pub fn scalar(&mut self, v: f32) -> Var {
        self.push(Vec::new(), vec![v], Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.node(v).value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), ng))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::Shape(format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (va, vb) = (self.value(a), self.value(b));
        let value: Vec<f32> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| op.apply(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&sa, &out);
            let ob = broadcast_offsets(&sb, &out);
            oa.iter()
                .zip(&ob)
                .map(|(&i, &j)| op.apply(va[i], vb[j]))
                .collect()
        };
        if op == BinaryOp::Div && value.iter().any(|v| !v.is_finite()) && vb.contains(&0.0)
        {
            return Err(Error::Domain("division by zero".into()));
        }
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(out, value, Op::Binary(op, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Min, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Max, a, b)
    }

    /// `x * c` for a scalar constant `c`.
    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(x, s)
    }

    /// `x + c` for a scalar constant `c`.
    pub fn shift(&mut self, x: Var, c: f32) -> Result<Var> {
        let s = self.scalar(c);
        self.add(x, s)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        self.live()?;
        let vx = self.value(x);
        if op == UnaryOp::Log {
            if let Some(bad) = vx.iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let value: Vec<f32> = vx.iter().map(|&v| op.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.node(x).needs_grad;
        Ok(self.push(shape, value, Op::Unary(op, x), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: Option<&[usize]>) -> Result<Var> {
        self.live()?;
        let shape = self.shape(x).to_vec();
        let mut axes: Vec<usize> = match axes {
            Some(a) => a.to_vec(),
            None => (0..shape.len()).collect(),
        };
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::Shape(format!("axis {bad} invalid for shape {shape:?}")));
        }
        let kept: Vec<usize> = (0..shape.len())
            .filter(|d| !axes.contains(d))
            .map(|d| shape[d])
            .collect();
        let keepdim: Vec<usize> = (0..shape.len())
            .map(|d| if axes.contains(&d) { 1 } else { shape[d] })
            .collect();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let offsets = broadcast_offsets(&keepdim, &shape);
        let mut value = vec![0.0f32; numel(&kept)];
        for (&o, &v) in offsets.iter().zip(self.value(x)) {
            value[o] += v;
        }
        if op == ReduceOp::Mean {
            let inv = 1.0 / count as f32;
            value.iter_mut().for_each(|v| *v *= inv);
        }
        let ng = self.node(x).needs_grad;
        Ok(self.push(kept, value, Op::Reduce { op, x, axes }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, None)
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, Some(axes))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, Some(axes))
    }

    /// Elementwise clamp into `[lo, hi]`. The gradient passes where
    /// `lo <= x <= hi`, boundaries included.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        self.live()?;
        if !(lo <= hi) {
            return Err(Error::Argument(format!("clamp bounds lo={lo} > hi={hi}")));
        }
        let value: Vec<f32> = self.value(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.node(x).needs_grad;
        Ok(self.push(shape, value, Op::Clamp { x, lo, hi }, ng))
    }

    /// Stacks tensors along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.live()?;
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        let mut ng = false;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Shape(format!(
                    "concat of {s:?} with trailing shape {tail:?}"
                )));
            }
            rows += s[0];
            value.extend_from_slice(self.value(p));
            ng |= self.node(p).needs_grad;
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(shape, value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.live()?;
        if numel(&shape) != self.value(x).len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        let ng = self.node(x).needs_grad;
        Ok(self.push(shape, value, Op::Reshape(x), ng))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.live()?;
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    if self.nodes[a.0].needs_grad {
                        let ga = grad_slot(&mut grads, *a, m * k);
                        kernels::matmul_nt_acc(&g, &self.nodes[b.0].value, m, k, nn, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = grad_slot(&mut grads, *b, k * nn);
                        kernels::matmul_tn_acc(&self.nodes[a.0].value, &g, m, k, nn, gb);
                    }
                }
                Op::Binary(op, a, b) => {
                    let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let oa = broadcast_offsets(&na.shape, &node.shape);
                    let ob = broadcast_offsets(&nb.shape, &node.shape);
                    let (va, vb) = (&na.value, &nb.value);
                    if na.needs_grad {
                        let mut ga = vec![0.0f32; va.len()];
                        for (e, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                            let d = match op {
                                BinaryOp::Add | BinaryOp::Sub => 1.0,
                                BinaryOp::Mul => vb[ib],
                                BinaryOp::Div => 1.0 / vb[ib],
                                BinaryOp::Min => (va[ia] <= vb[ib]) as u8 as f32,
                                BinaryOp::Max => (va[ia] >= vb[ib]) as u8 as f32,
                            };
                            ga[ia] += g[e] * d;
                        }
                        add_into(&mut grads, *a, &ga);
                    }
                    if nb.needs_grad {
                        let mut gb = vec![0.0f32; vb.len()];
                        for (e, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                            let d = match op {
                                BinaryOp::Add => 1.0,
                                BinaryOp::Sub => -1.0,
                                BinaryOp::Mul => va[ia],
                                BinaryOp::Div => -va[ia] / (vb[ib] * vb[ib]),
                                BinaryOp::Min => (vb[ib] < va[ia]) as u8 as f32,
                                BinaryOp::Max => (vb[ib] > va[ia]) as u8 as f32,
                            };
                            gb[ib] += g[e] * d;
                        }
                        add_into(&mut grads, *b, &gb);
                    }
                }
                Op::Unary(op, x) => {
                    let nx = &self.nodes[x.0];
                    let gx: Vec<f32> = nx
                        .value
                        .iter()
                        .zip(&node.value)
                        .zip(&g)
                        .map(|((&xv, &yv), &gv)| gv * op.derivative(xv, yv))
                        .collect();
                    add_into(&mut grads, *x, &gx);
                }
                Op::Reduce { op, x, axes } => {
                    let nx = &self.nodes[x.0];
                    let keepdim: Vec<usize> = (0..nx.shape.len())
                        .map(|d| if axes.contains(&d) { 1 } else { nx.shape[d] })
                        .collect();
                    let scale = match op {
                        ReduceOp::Sum => 1.0,
                        ReduceOp::Mean => {
                            1.0 / axes.iter().map(|&a| nx.shape[a]).product::<usize>() as f32
                        }
                    };
                    let offsets = broadcast_offsets(&keepdim, &nx.shape);
                    let gx: Vec<f32> = offsets.iter().map(|&o| g[o] * scale).collect();
                    add_into(&mut grads, *x, &gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let nx = &self.nodes[x.0];
                    let gx: Vec<f32> = nx
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { 0.0 })
                        .collect();
                    add_into(&mut grads, *x, &gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        if self.nodes[p.0].needs_grad {
                            add_into(&mut grads, *p, &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::Reshape(x) => add_into(&mut grads, *x, &g),
            }
        }

        for (i, node) in self.nodes.iter().enumerate().take(n) {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn grad_slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
