//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation whose inputs require gradients, in
//! order. [`Tape::backward`] walks the record in reverse and accumulates
//! `∂loss/∂node` into every leaf that asked for a gradient. A tape can be
//! differentiated once; build a fresh tape for the next step.
//!
//! Operations on inputs that do not require gradients are evaluated eagerly
//! and stored as constants, so the same forward code serves both training
//! and inference.

use std::fmt;

use crate::error::{contract, dim_err, Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// An operation with a hand-written vector-Jacobian product, defined outside
/// this module.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the tape only needs the backward rule.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// One entry per input: `None` when the input gets no gradient.
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], output: &Tensor)
        -> Vec<Option<Vec<f64>>>;
}

const NORM_EPS: f64 = 1e-24;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScalarMul(Var, Var),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    RowNorm(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    BlockAttention { q: Var, k: Var, v: Var, group: usize, scale: f64, probs: Vec<f64> },
    LogSumExpRows { x: Var, mask: Option<Vec<bool>> },
    Diag(Var),
    Reshape(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    reached: Vec<bool>,
    differentiated: bool,
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

    /// Records a leaf. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        tensor.zero_grad();
        self.nodes.push(Node {
            value: tensor,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant copy of `v`: same value, cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        if self.differentiated {
            return contract("tape was already differentiated; record on a fresh tape");
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return dim_err(name, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(name, out, &[x], op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return dim_err("matmul", format!("{m}x{k} · {k2}x{n}"));
        }
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, data)?, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        self.push("transpose", t, &[a], Op::Transpose(a))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1×n` (or length-`n`) row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).numel() != n {
            return dim_err(
                "add_row",
                format!("bias of {} values for {n} columns", self.value(bias).numel()),
            );
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.push("add_row", Tensor::matrix(m, n, data)?, &[x, bias], Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        self.map("scalar_mul", x, |v| v * sv, Op::ScalarMul(s, x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, f64::ln, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let width = *xt.shape().last().unwrap_or(&1);
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(width) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        self.push("softmax", out, &[x], Op::Softmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Scales each row to unit Euclidean length.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in data.chunks_mut(n) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(
            "normalize_rows",
            Tensor::matrix(m, n, data)?,
            &[x],
            Op::NormalizeRows { x, norms },
        )
    }

    /// Euclidean norm of each row, as an `m×1` column.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| (r.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt())
            .collect();
        self.push("l2_norm", Tensor::matrix(m, 1, data)?, &[x], Op::RowNorm(x))
    }

    /// Pairwise row cosine similarities: `out[i][j] = cos(a_i, b_j)`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let mut data = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for row in data.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * inv);
            inv_std.push(inv);
        }
        self.push(
            "layer_norm",
            Tensor::matrix(m, n, data)?,
            &[x],
            Op::LayerNorm { x, inv_std },
        )
    }

    /// Scaled dot-product attention restricted to contiguous blocks of
    /// `group` rows: row `r` attends only to rows of its own block.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, group: usize) -> Result<Var> {
        let (rows, dk) = self.value(q).dims2()?;
        if self.value(k).dims2()? != (rows, dk) {
            return dim_err("block_attention", "query and key shapes differ");
        }
        let (vrows, dv) = self.value(v).dims2()?;
        if vrows != rows {
            return dim_err("block_attention", "value rows differ from query rows");
        }
        if group == 0 || rows % group != 0 {
            return dim_err("block_attention", format!("{rows} rows not divisible into groups of {group}"));
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = Vec::with_capacity(rows * group);
        let mut out = Vec::with_capacity(rows * dv);
        for g0 in (0..rows).step_by(group) {
            let qg = &qd[g0 * dk..(g0 + group) * dk];
            let kg = &kd[g0 * dk..(g0 + group) * dk];
            let vg = &vd[g0 * dv..(g0 + group) * dv];
            let mut scores = gemm_nt(qg, kg, group, dk, group);
            for row in scores.chunks_mut(group) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            out.extend(gemm(&scores, vg, group, group, dv));
            probs.extend(scores);
        }
        self.push(
            "block_attention",
            Tensor::matrix(rows, dv, out)?,
            &[q, k, v],
            Op::BlockAttention { q, k, v, group, scale, probs },
        )
    }

    /// Row-wise log-sum-exp, skipping entries where `mask` is `true`.
    /// Returns an `m×1` column.
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(mask) = &mask {
            if mask.len() != m * n {
                return dim_err("logsumexp_rows", "mask size differs from input");
            }
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let included = |j: usize| mask.as_ref().is_none_or(|mk| !mk[i * n + j]);
            let row = &data[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| included(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return contract(format!("logsumexp_rows: row {i} has no unmasked entries"));
            }
            let s: f64 = (0..n).filter(|&j| included(j)).map(|j| (row[j] - max).exp()).sum();
            out.push(max + s.ln());
        }
        self.push(
            "logsumexp_rows",
            Tensor::matrix(m, 1, out)?,
            &[x],
            Op::LogSumExpRows { x, mask },
        )
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if m != n {
            return dim_err("diag", format!("{m}x{n} is not square"));
        }
        let d = (0..n).map(|i| self.value(x).get(i, i)).collect();
        self.push("diag", Tensor::matrix(n, 1, d)?, &[x], Op::Diag(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", t, &[x], Op::Reshape(x))
    }

    /// Records a value computed outside the tape together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(name, output, inputs, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Gradient of `loss` with respect to `v`, available after [`Tape::backward`].
    /// Leaves that require gradients but were not reached report zeros.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Whether `v` lies on a differentiable path to the loss.
    pub fn is_reached(&self, v: Var) -> bool {
        self.reached.get(v.0).copied().unwrap_or(false)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return contract("backward called twice on the same tape");
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return contract(format!("backward needs a scalar loss, got shape {:?}", lt.shape()));
        }
        if !self.nodes[loss.0].requires_grad {
            return contract("loss does not depend on any leaf that requires gradients");
        }
        self.differentiated = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut reached = vec![false; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            reached[idx] = true;
            for (input, contribution) in self.vjp(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                reached[input.0] = true;
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        self.reached = reached;
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn vjp(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = dims(val(*a));
                let n = val(*b).shape()[1];
                vec![
                    (*a, gemm_nt(g, val(*b).data(), m, n, k)),
                    (*b, gemm_tn(val(*a).data(), g, m, k, n)),
                ]
            }
            Op::Transpose(a) => {
                let (r, c) = dims(val(*a));
                let gt = Tensor::matrix(c, r, g.to_vec()).and_then(|t| t.transpose());
                vec![(*a, gt.map(Tensor::into_data).unwrap_or_default())]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => vec![
                (*a, g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect()),
                (*b, g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect()),
            ],
            Op::AddRow(x, bias) => {
                let n = val(*bias).numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::ScalarMul(s, x) => {
                let sv = val(*s).data()[0];
                let gs: f64 = g.iter().zip(val(*x).data()).map(|(g, x)| g * x).sum();
                vec![(*s, vec![gs]), (*x, g.iter().map(|v| v * sv).collect())]
            }
            Op::Exp(x) => vec![(*x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect())],
            Op::Log(x) => vec![(*x, g.iter().zip(val(*x).data()).map(|(g, x)| g / x).collect())],
            Op::Sigmoid(x) => vec![(
                *x,
                g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )],
            Op::Softmax(x) => {
                let width = *out.shape().last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(width).zip(out.data().chunks(width)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::NormalizeRows { x, norms } => {
                let n = out.shape()[1];
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), norm) in g.chunks(n).zip(out.data().chunks(n)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * dot) / norm));
                }
                vec![(*x, gx)]
            }
            Op::RowNorm(x) => {
                let n = val(*x).shape()[1];
                let mut gx = Vec::with_capacity(val(*x).numel());
                for ((xr, gi), norm) in val(*x).data().chunks(n).zip(g).zip(out.data()) {
                    gx.extend(xr.iter().map(|xv| gi * xv / norm));
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm { x, inv_std } => {
                let n = out.shape()[1];
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), inv) in g.chunks(n).zip(out.data().chunks(n)).zip(inv_std) {
                    let gmean = gr.iter().sum::<f64>() / n as f64;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    gx.extend(gr.iter().zip(yr).map(|(gi, yi)| inv * (gi - gmean - yi * gy)));
                }
                vec![(*x, gx)]
            }
            Op::BlockAttention { q, k, v, group, scale, probs } => {
                attention_vjp(val(*q), val(*k), val(*v), *group, *scale, probs, g)
                    .into_iter()
                    .zip([*q, *k, *v])
                    .map(|(gi, var)| (var, gi))
                    .collect()
            }
            Op::LogSumExpRows { x, mask } => {
                let n = val(*x).shape()[1];
                let xd = val(*x).data();
                let mut gx = vec![0.0; xd.len()];
                for (i, (&gi, &lse)) in g.iter().zip(out.data()).enumerate() {
                    for j in 0..n {
                        if mask.as_ref().is_some_and(|mk| mk[i * n + j]) {
                            continue;
                        }
                        gx[i * n + j] = gi * (xd[i * n + j] - lse).exp();
                    }
                }
                vec![(*x, gx)]
            }
            Op::Diag(x) => {
                let n = val(*x).shape()[0];
                let mut gx = vec![0.0; n * n];
                for i in 0..n {
                    gx[i * n + i] = g[i];
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                inputs
                    .iter()
                    .zip(op.backward(g, &ins, out))
                    .filter_map(|(v, gi)| gi.map(|gi| (*v, gi)))
                    .collect()
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn attention_vjp(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    group: usize,
    scale: f64,
    probs: &[f64],
    g: &[f64],
) -> [Vec<f64>; 3] {
    let (rows, dk) = dims(q);
    let dv = v.shape()[1];
    let (mut gq, mut gk, mut gv) = (vec![0.0; rows * dk], vec![0.0; rows * dk], vec![0.0; rows * dv]);
    for g0 in (0..rows).step_by(group) {
        let a = &probs[g0 * group..(g0 + group) * group];
        let go = &g[g0 * dv..(g0 + group) * dv];
        let vg = &v.data()[g0 * dv..(g0 + group) * dv];
        let qg = &q.data()[g0 * dk..(g0 + group) * dk];
        let kg = &k.data()[g0 * dk..(g0 + group) * dk];

        gv[g0 * dv..(g0 + group) * dv].copy_from_slice(&gemm_tn(a, go, group, group, dv));
        let ga = gemm_nt(go, vg, group, dv, group);
        let mut gs = vec![0.0; group * group];
        for i in 0..group {
            let ar = &a[i * group..(i + 1) * group];
            let gar = &ga[i * group..(i + 1) * group];
            let dot: f64 = ar.iter().zip(gar).map(|(x, y)| x * y).sum();
            for j in 0..group {
                gs[i * group + j] = ar[j] * (gar[j] - dot) * scale;
            }
        }
        gq[g0 * dk..(g0 + group) * dk].copy_from_slice(&gemm(&gs, kg, group, group, dk));
        gk[g0 * dk..(g0 + group) * dk].copy_from_slice(&gemm_tn(&gs, qg, group, group, dk));
    }
    [gq, gk, gv]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = m(3, 3, &[1.0, -2.0, 3.5, 0.0, 4.0, 1.0, 2.0, 2.0, -7.0]);
        let i = tape.constant(Tensor::identity(3));
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 0.5);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unrelated_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.param(Tensor::scalar(5.0));
        let loss = tape.mul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[0.0]);
        assert!(!tape.is_reached(y));
        assert!(tape.is_reached(x));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let loss = tape.mul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { op: "matmul", .. })));
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(Error::Dimension { op: "add", .. })));
    }

    #[test]
    fn non_finite_results_name_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
        let big = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(big), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn constants_are_not_recorded_for_gradients() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.exp(a).unwrap();
        assert!(!tape.requires_grad(b));
        assert!(tape.backward(b).is_err());
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let mask = vec![true, true, false, false];
        assert!(tape.logsumexp_rows(x, Some(mask)).is_err());
    }

    #[test]
    fn cosine_of_row_with_itself_is_one() {
        let mut tape = Tape::new();
        let a = tape.constant(m(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]));
        let c = tape.cosine_similarity(a, a).unwrap();
        let t = tape.value(c);
        assert!((t.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((t.get(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn attention_stays_inside_groups() {
        let mut tape = Tape::new();
        let q = tape.constant(m(4, 1, &[1.0, 2.0, 3.0, 4.0]));
        let v = tape.constant(m(4, 1, &[10.0, 10.0, -5.0, -5.0]));
        let out = tape.block_attention(q, q, v, 2).unwrap();
        let o = tape.value(out).data();
        assert!((o[0] - 10.0).abs() < 1e-12 && (o[1] - 10.0).abs() < 1e-12);
        assert!((o[2] + 5.0).abs() < 1e-12 && (o[3] + 5.0).abs() < 1e-12);
    }
}
