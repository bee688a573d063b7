//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! list once in reverse recording order and applies each node's rule.

use super::kernels::{self, LayerNormCache};
use super::{transpose_last_raw, MatmulPlan, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tag for the elementwise family of ops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Scale(f64),
}

impl ElementwiseOp {
    pub fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Relu => "relu",
            Self::Scale(_) => "scale",
        }
    }

    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }

    pub(crate) fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Self::Add => a + b,
            Self::Sub => a - b,
            Self::Mul => a * b,
            Self::Relu => if a < 0.0 { 0.0 } else { a },
            Self::Scale(c) => a * c,
        }
    }
}

/// Deliberate corruption of one backward rule, used as a negative control
/// for the gradient checker.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    /// Op name as reported by the tape (`"matmul"`, `"layer_norm"`, ...).
    pub op: String,
    /// Multiplier applied to the upstream gradient of that op.
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var, MatmulPlan),
    TransposeLast(Var),
    Binary(ElementwiseOp, Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    MeanTokens(Var),
    Sum(Var),
    PadLast(Var),
    Reshape(Var),
    SliceRows(Var),
    ConcatLast(Vec<Var>),
    Mask(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::TransposeLast(_) => "transpose",
            Op::Binary(op, ..) => op.name(),
            Op::Relu(_) => "relu",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanTokens(_) => "mean_tokens",
            Op::Sum(_) => "sum",
            Op::PadLast(_) => "pad",
            Op::Reshape(_) => "reshape",
            Op::SliceRows(_) => "slice_rows",
            Op::ConcatLast(_) => "concat",
            Op::Mask(..) => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Ordered record of executed ops.
///
/// `backward` accumulates into the gradient slots of the recorded tensors;
/// calling it twice without [`Tape::zero_grads`] sums both passes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
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

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Records a trainable tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true, true)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if n.value.grad().is_some() {
                n.value.zero_grad();
            }
        }
    }

    fn push_node(&mut self, mut value: Tensor, op: Op, requires_grad: bool, is_param: bool) -> Var {
        // a gradient carried in from outside must not leak into this pass
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push_node(value, op, requires_grad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let shape = plan.out_shape.clone();
        Ok(self.push(shape, out, Op::MatMul(a, b, plan), &[a, b]))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let (shape, data) = transpose_last_raw(t.shape(), t.data());
        Ok(self.push(shape, data, Op::TransposeLast(a), &[a]))
    }

    /// Applies an elementwise op; binary ops broadcast `b` over leading axes of `a`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => {
                let out = self.value(a).zip_with(self.value(b), op)?;
                let shape = out.shape().to_vec();
                Ok(self.push(shape, out.into_data(), Op::Binary(op, a, b), &[a, b]))
            }
            (false, None) => {
                let x = self.value(a);
                let shape = x.shape().to_vec();
                let data = x.data().iter().map(|&v| op.apply(v, 0.0)).collect();
                let node = match op {
                    ElementwiseOp::Relu => Op::Relu(a),
                    ElementwiseOp::Scale(c) => Op::Scale(a, c),
                    _ => unreachable!(),
                };
                Ok(self.push(shape, data, node, &[a]))
            }
            _ => Err(Error::Contract(format!(
                "elementwise {} called with wrong operand count",
                op.name()
            ))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(ElementwiseOp::Relu, a, None).unwrap()
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.elementwise(ElementwiseOp::Scale(c), a, None).unwrap()
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        let shape = out.shape().to_vec();
        self.push(shape, out.into_data(), Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", xt.shape(), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be > 0"));
        }
        let mut out = vec![0.0; xt.numel()];
        let cache = kernels::layer_norm(
            d,
            xt.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            &mut out,
        );
        let shape = xt.shape().to_vec();
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            cache,
        };
        Ok(self.push(shape, out, op, &[x, gamma, beta]))
    }

    /// Mean over the token axis: `[T,d] → [d]`, `[B,T,d] → [B,d]`.
    pub fn mean_tokens(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 2 {
            return Err(Error::Contract("mean_tokens needs rank >= 2".into()));
        }
        let r = t.rank();
        let (tokens, d) = (t.shape()[r - 2], t.shape()[r - 1]);
        let batch = t.numel() / (tokens * d);
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let o = &mut out[b * d..(b + 1) * d];
            for row in t.data()[b * tokens * d..(b + 1) * tokens * d].chunks_exact(d) {
                o.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
            }
            o.iter_mut().for_each(|v| *v /= tokens as f64);
        }
        let mut shape = t.shape()[..r - 2].to_vec();
        shape.push(d);
        Ok(self.push(shape, out, Op::MeanTokens(a), &[a]))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Right-pads the last axis with zeros up to `len`.
    pub fn pad_last(&mut self, a: Var, len: usize) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        if len < d {
            return Err(Error::dim("pad", t.shape(), &[len]));
        }
        let mut out = Vec::with_capacity(t.numel() / d * len);
        for row in t.data().chunks_exact(d) {
            out.extend_from_slice(row);
            out.resize(out.len() + len - d, 0.0);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(shape, out, Op::PadLast(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::dim("reshape", t.shape(), &shape));
        }
        let data = t.data().to_vec();
        Ok(self.push(shape, data, Op::Reshape(a), &[a]))
    }

    /// First `rows` entries along axis 0.
    pub fn slice_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if rows == 0 || rows > t.shape()[0] {
            return Err(Error::dim("slice_rows", t.shape(), &[rows]));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows;
        let n: usize = shape.iter().product();
        let data = t.data()[..n].to_vec();
        Ok(self.push(shape, data, Op::SliceRows(a), &[a]))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Elementwise product with a fixed mask (inverted dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(Error::dim("dropout", t.shape(), &[mask.len()]));
        }
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(shape, data, Op::Mask(a, mask), &[a]))
    }

    /// Sparse categorical cross-entropy over `[B,R]` logits, averaged over the batch.
    ///
    /// Optional per-sample weights scale each term; the divisor stays `B`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[labels.len()]));
        }
        let classes = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let weights = match weights {
            Some(w) if w.len() != labels.len() => {
                return Err(Error::dim("cross_entropy", &[labels.len()], &[w.len()]))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; labels.len()],
        };
        let mut probs = vec![0.0; t.numel()];
        kernels::softmax_rows(classes, t.data(), &mut probs);
        let mut loss = 0.0;
        for (i, (&l, &w)) in labels.iter().zip(&weights).enumerate() {
            let row = t.row(i);
            loss += w * (kernels::log_sum_exp(row) - row[l]);
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            weights,
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every trainable leaf ends with a gradient slot; leaves without a path
    /// to the loss get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(mut dy) = grads[i].take() else {
                continue;
            };
            if let Some(f) = &self.fault {
                if f.op == self.nodes[i].op.name() {
                    dy.iter_mut().for_each(|g| *g *= f.factor);
                }
            }
            self.apply_rule(i, &dy, &mut grads);
            // Keep the (possibly faulted) upstream gradient visible on the node.
            grads[i] = Some(dy);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                node.value.accumulate_grad(&g);
            } else if node.is_param && node.value.grad().is_none() {
                node.value.zero_grad();
            }
        }
        for node in self.nodes.iter_mut().skip(n) {
            if node.is_param && node.value.grad().is_none() {
                node.value.zero_grad();
            }
        }
        Ok(())
    }

    fn apply_rule(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        if !node.requires_grad {
            return;
        }
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let data = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b, plan) => {
                let mut da = vec![0.0; numel(*a)];
                let mut db = vec![0.0; numel(*b)];
                plan.backward(data(*a), data(*b), dy, &mut da, &mut db);
                if wants(*a) {
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    accumulate(grads, *b, &db);
                }
            }
            Op::TransposeLast(a) => {
                let (_, g) = transpose_last_raw(node.value.shape(), dy);
                accumulate(grads, *a, &g);
            }
            Op::Binary(op, a, b) => {
                let m = numel(*b);
                let (av, bv) = (data(*a), data(*b));
                let (da, db): (Vec<f64>, Vec<f64>) = match op {
                    ElementwiseOp::Add => (dy.to_vec(), reduce_broadcast(dy, m, |g, _| g)),
                    ElementwiseOp::Sub => (dy.to_vec(), reduce_broadcast(dy, m, |g, _| -g)),
                    ElementwiseOp::Mul => (
                        dy.iter().enumerate().map(|(j, g)| g * bv[j % m]).collect(),
                        reduce_broadcast(dy, m, |g, j| g * av[j]),
                    ),
                    _ => unreachable!(),
                };
                if wants(*a) {
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    accumulate(grads, *b, &db);
                }
            }
            Op::Relu(a) => {
                let x = data(*a);
                let g: Vec<f64> = dy
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &g);
            }
            Op::Scale(a, c) => {
                let g: Vec<f64> = dy.iter().map(|g| g * c).collect();
                accumulate(grads, *a, &g);
            }
            Op::Softmax(a) => {
                let mut g = vec![0.0; dy.len()];
                kernels::softmax_rows_backward(node.value.last_dim(), node.value.data(), dy, &mut g);
                accumulate(grads, *a, &g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let d = node.value.last_dim();
                let mut dx = vec![0.0; dy.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                kernels::layer_norm_backward(d, cache, data(*gamma), dy, &mut dx, &mut dg, &mut db);
                if wants(*x) {
                    accumulate(grads, *x, &dx);
                }
                if wants(*gamma) {
                    accumulate(grads, *gamma, &dg);
                }
                if wants(*beta) {
                    accumulate(grads, *beta, &db);
                }
            }
            Op::MeanTokens(a) => {
                let s = self.nodes[a.0].value.shape();
                let r = s.len();
                let (tokens, d) = (s[r - 2], s[r - 1]);
                let mut g = vec![0.0; numel(*a)];
                for (b, dyr) in dy.chunks_exact(d).enumerate() {
                    for t in 0..tokens {
                        let off = (b * tokens + t) * d;
                        for j in 0..d {
                            g[off + j] = dyr[j] / tokens as f64;
                        }
                    }
                }
                accumulate(grads, *a, &g);
            }
            Op::Sum(a) => {
                let g = vec![dy[0]; numel(*a)];
                accumulate(grads, *a, &g);
            }
            Op::PadLast(a) => {
                let d = self.nodes[a.0].value.last_dim();
                let len = node.value.last_dim();
                let g: Vec<f64> = dy.chunks_exact(len).flat_map(|r| r[..d].to_vec()).collect();
                accumulate(grads, *a, &g);
            }
            Op::Reshape(a) => accumulate(grads, *a, dy),
            Op::SliceRows(a) => {
                let mut g = vec![0.0; numel(*a)];
                g[..dy.len()].copy_from_slice(dy);
                accumulate(grads, *a, &g);
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let rows = dy.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    if wants(p) {
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            g.extend_from_slice(&dy[r * total + off..r * total + off + w]);
                        }
                        accumulate(grads, p, &g);
                    }
                    off += w;
                }
            }
            Op::Mask(a, mask) => {
                let g: Vec<f64> = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *a, &g);
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let classes = self.nodes[logits.0].value.last_dim();
                let scale = dy[0] / labels.len() as f64;
                let mut g = probs.clone();
                for (i, (&l, &w)) in labels.iter().zip(weights).enumerate() {
                    let row = &mut g[i * classes..(i + 1) * classes];
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= w * scale);
                }
                accumulate(grads, *logits, &g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Sums `f(dy[j], j)` over the broadcast axes into a length-`m` buffer.
fn reduce_broadcast(dy: &[f64], m: usize, f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (j, &g) in dy.iter().enumerate() {
        out[j % m] += f(g, j);
    }
    out
}
