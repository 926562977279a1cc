//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded in creation order, so the tape is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Nodes that cannot reach a trainable leaf carry `requires_grad = false` and
//! are skipped entirely on the way back; frozen weights cost no gradient work.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, gemm_a_bt, gemm_at_b, gemm_view, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Batch reduction applied by [`Graph::softmax_cross_entropy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Relu(Var),
    Sqrt(Var),
    Reshape(Var),
    FrobeniusNormSq(Var),
    MeanPool {
        x: Var,
        seq: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        reduction: Reduction,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation graph under construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient with respect to any node; zero when the node did not
    /// participate in the loss.
    pub fn of(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Raw gradient slice, if the node received any gradient.
    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Gradient for a named trainable parameter.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&v| self.of(v))
    }

    /// All trainable parameters with their gradients, in name order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Tensor)> + '_ {
        self.params.iter().map(|(n, &v)| (n.as_str(), self.of(v)))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Registers a trainable leaf under a unique name.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::contract(format!(
                "parameter {name} registered twice on one graph"
            )));
        }
        let var = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Matrix product of `a: m×k` and `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Element-wise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `x + y` where `y` is tiled over `x` in row-major order: a bias row
    /// over every row, or a `[seq, d]` positional table over each sequence.
    /// The last dimensions must agree and `y` must evenly divide `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        let (nx, ny) = (self.value(x).len(), self.value(y).len());
        if sx.last() != sy.last() || nx % ny != 0 {
            return Err(Error::shape("add_broadcast", sx, sy));
        }
        let yv = self.value(y).data();
        let period = yv.len();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + yv[i % period])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(&[x, y]);
        Ok(self.push(value, Op::AddBroadcast(x, y), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a + c).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum of a list of scalars, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::contract("add_all of an empty list"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Element-wise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Element-wise square root of non-negative input; the derivative at 0
    /// is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|&a| a < 0.0) {
            return Err(Error::contract("sqrt of a negative value"));
        }
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.sqrt()).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Sqrt(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Squared Frobenius norm: the sum of squared elements.
    pub fn frobenius_norm_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::FrobeniusNormSq(x), rg)
    }

    /// Averages `[batch·seq, d]` token rows into `[batch, d]`.
    pub fn mean_pool(&mut self, x: Var, seq: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || seq == 0 || !s[0].is_multiple_of(seq) {
            return Err(Error::shape("mean_pool", s, &[seq]));
        }
        let (rows, d) = (s[0], s[1]);
        let batch = rows / seq;
        let xv = self.value(x).data();
        let mut out = vec![0.0; batch * d];
        let inv = 1.0 / seq as f64;
        for b in 0..batch {
            let o = &mut out[b * d..(b + 1) * d];
            for t in 0..seq {
                let r = &xv[(b * seq + t) * d..(b * seq + t + 1) * d];
                o.iter_mut().zip(r).for_each(|(a, v)| *a += v);
            }
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![batch, d], out)?, Op::MeanPool { x, seq }, rg))
    }

    /// Layer normalization over the last dimension of `x: [n, d]` with
    /// scale `gamma: [d]` and shift `beta: [d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("layer_norm", s, self.shape(gamma)));
        }
        let (n, d) = (s[0], s[1]);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", s, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + bt[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention without masking.
    ///
    /// `q`, `k`, `v` are `[batch·seq, d]` projections; heads split `d` into
    /// contiguous column blocks. Returns the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s || self.shape(v) != s {
            return Err(Error::shape("attention", &s, self.shape(k)));
        }
        let (rows, d) = (s[0], s[1]);
        if seq == 0 || rows % seq != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", &s, &[seq, heads]));
        }
        let batch = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let ss = seq * seq;
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * ss..(b * heads + h + 1) * ss];
                // S = Q_h · K_hᵀ
                gemm_view(seq, dh, seq, &qv[off..], (d, 1), &kv[off..], (1, d), p, seq, false);
                for row in p.chunks_mut(seq) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) * scale;
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r * scale - max).exp();
                        z += *r;
                    }
                    row.iter_mut().for_each(|r| *r /= z);
                }
                // O_h = P · V_h
                gemm_view(seq, seq, dh, p, (seq, 1), &vv[off..], (d, 1), &mut out[off..], d, false);
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Cross-entropy of row-wise softmax over `logits: [batch, classes]`,
    /// computed through log-sum-exp.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        if reduction == Reduction::Mean {
            total /= b as f64;
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                reduction,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let bv = self.value(*b).data();
                    gemm_a_bt(m, n, k, g, bv, acc(grads, nodes, *a));
                }
                if wants(*b) {
                    let av = self.value(*a).data();
                    gemm_at_b(k, m, n, av, g, acc(grads, nodes, *b));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc(grads, nodes, v).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddBroadcast(x, y) => {
                if wants(*x) {
                    acc(grads, nodes, *x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if wants(*y) {
                    let gy = acc(grads, nodes, *y);
                    let period = gy.len();
                    for (i, v) in g.iter().enumerate() {
                        gy[i % period] += v;
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    acc(grads, nodes, *x).iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if wants(*x) {
                    acc(grads, nodes, *x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc(grads, nodes, *x).iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = self.value(*x).data();
                    acc(grads, nodes, *x)
                        .iter_mut()
                        .zip(g)
                        .zip(xv)
                        .for_each(|((a, b), v)| {
                            if *v > 0.0 {
                                *a += b
                            }
                        });
                }
            }
            Op::Sqrt(x) => {
                if wants(*x) {
                    let out = node.value.data();
                    acc(grads, nodes, *x)
                        .iter_mut()
                        .zip(g)
                        .zip(out)
                        .for_each(|((a, b), s)| {
                            if *s > 0.0 {
                                *a += b / (2.0 * s)
                            }
                        });
                }
            }
            Op::FrobeniusNormSq(x) => {
                if wants(*x) {
                    let xv = self.value(*x).data();
                    acc(grads, nodes, *x)
                        .iter_mut()
                        .zip(xv)
                        .for_each(|(a, v)| *a += 2.0 * v * g[0]);
                }
            }
            Op::MeanPool { x, seq } => {
                if wants(*x) {
                    let d = self.shape(*x)[1];
                    let inv = 1.0 / *seq as f64;
                    let gx = acc(grads, nodes, *x);
                    for (r, row) in gx.chunks_mut(d).enumerate() {
                        let src = &g[(r / seq) * d..(r / seq + 1) * d];
                        row.iter_mut().zip(src).for_each(|(a, b)| *a += b * inv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let n = rstd.len();
                if wants(*gamma) {
                    let gg = acc(grads, nodes, *gamma);
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = acc(grads, nodes, *beta);
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                }
                if wants(*x) {
                    let gam = self.value(*gamma).data();
                    let gx = acc(grads, nodes, *x);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            let v = g[i * d + j] * gam[j];
                            dxhat[j] = v;
                            mean_d += v;
                            mean_dx += v * xhat[i * d + j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            gx[i * d + j] +=
                                rstd[i] * (dxhat[j] - mean_d - xhat[i * d + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, (*batch, *seq, *heads), probs, g, grads),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                reduction,
                probs,
            } => {
                if wants(*logits) {
                    let c = self.shape(*logits)[1];
                    let scale = match reduction {
                        Reduction::Mean => g[0] / labels.len() as f64,
                        Reduction::Sum => g[0],
                    };
                    let gl = acc(grads, nodes, *logits);
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        (batch, seq, heads): (usize, usize, usize),
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let rows = batch * seq;
        let ss = seq * seq;
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut ds = vec![0.0; ss];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * ss..(b * heads + h + 1) * ss];
                // dV_h += Pᵀ · dO_h
                gemm_view(seq, seq, dh, p, (1, seq), &g[off..], (d, 1), &mut gv[off..], d, true);
                // dP = dO_h · V_hᵀ
                gemm_view(seq, dh, seq, &g[off..], (d, 1), &vv[off..], (1, d), &mut ds, seq, false);
                // dS = P ∘ (dP − rowsum(dP ∘ P)), folded with the score scale
                for (drow, prow) in ds.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    drow.iter_mut()
                        .zip(prow)
                        .for_each(|(x, pij)| *x = pij * (*x - dot) * scale);
                }
                // dQ_h += dS · K_h ; dK_h += dSᵀ · Q_h
                gemm_view(seq, seq, dh, &ds, (seq, 1), &kv[off..], (d, 1), &mut gq[off..], d, true);
                gemm_view(seq, seq, dh, &ds, (1, seq), &qv[off..], (d, 1), &mut gk[off..], d, true);
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].requires_grad {
                let dst = grads[var.0].get_or_insert_with(|| vec![0.0; rows * d]);
                dst.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}
