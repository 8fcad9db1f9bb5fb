//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends a node whose inputs were recorded earlier, so the
//! node order is already topological; `backward` walks it once in reverse.
//! A node requires a gradient when any of its inputs does, and only those
//! nodes receive one.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{ensure_same_shape, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    Relu(usize),
    Sigmoid(usize),
    Clamp01(usize),
    AvgPool2(usize),
    Upsample2(usize),
    GlobalAvgPool(usize),
    Linear { x: usize, w: usize, b: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, f64),
    AddScalar(usize),
    Concat(usize, usize),
    Reshape(usize),
    Tile(usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    Mse(usize, usize),
    L2Norm(usize),
    RankLoss { p: usize, targets: Vec<f64>, norm: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::ForeignVar {
                tape: self.id,
                var_tape: v.tape,
            });
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// requires one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        let g = self.grads.get(v.idx)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.idx].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let out = kernels::conv2d(&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value, stride, pad)?;
        Ok(self.push(out, Op::Conv2d { x: xi, w: wi, b: bi, stride, pad }, &[xi, wi, bi]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.map(|v| v.max(0.0));
        Ok(self.push(out, Op::Relu(xi), &[xi]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(xi), &[xi]))
    }

    /// Clamps to `[0, 1]`; the gradient passes only strictly inside.
    pub fn clamp01(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.clamp01();
        Ok(self.push(out, Op::Clamp01(xi), &[xi]))
    }

    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = kernels::avg_pool2(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::AvgPool2(xi), &[xi]))
    }

    pub fn nearest_upsample2d(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = kernels::upsample2(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::Upsample2(xi), &[xi]))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = kernels::global_avg_pool(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::GlobalAvgPool(xi), &[xi]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let out = kernels::linear(&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value)?;
        Ok(self.push(out, Op::Linear { x: xi, w: wi, b: bi }, &[xi, wi, bi]))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ai].value.zip_map(&self.nodes[bi].value, op, f)?;
        Ok((ai, bi, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(ai, bi), &[ai, bi]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(ai, bi), &[ai, bi]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ai, bi), &[ai, bi]))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.map(|v| v * s);
        Ok(self.push(out, Op::MulScalar(xi, s), &[xi]))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.map(|v| v + s);
        Ok(self.push(out, Op::AddScalar(xi), &[xi]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = kernels::concat_channels(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(out, Op::Concat(ai, bi), &[ai, bi]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(xi), &[xi]))
    }

    /// Repeats a `[1, ...]` tensor `n` times along the leading axis.
    pub fn tile_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        if v.rank() == 0 || v.shape()[0] != 1 {
            return Err(Error::dim("tile_batch", "0", 1, v.shape().first().copied().unwrap_or(0)));
        }
        if n == 0 {
            return Err(Error::dim("tile_batch", "count", ">= 1", 0));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        let data = v.data().repeat(n);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Tile(xi), &[xi]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        Ok(self.push(out, Op::Sum(xi), &[xi]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        Ok(self.push(out, Op::Mean(xi), &[xi]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].value.map(|v| v * v);
        Ok(self.push(out, Op::Square(xi), &[xi]))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        ensure_same_shape("mse", va, vb)?;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / va.len() as f64);
        Ok(self.push(out, Op::Mse(ai, bi), &[ai, bi]))
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken
    /// to be zero.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.l2_norm());
        Ok(self.push(out, Op::L2Norm(xi), &[xi]))
    }

    /// Pairwise ranking penalty
    /// `(1/n^2) * sum_ij max(0, R_ij) / (1 + max_ij |R_ij|)` with
    /// `R_ij = (p_i - p_j) * sign(t_j - t_i)`.
    ///
    /// The normalizer is treated as a constant in the backward pass. Passing
    /// `frozen_norm` replaces it by a fixed value, which lets a
    /// finite-difference check see exactly the function being differentiated.
    pub fn rank_loss(&mut self, p: Var, targets: &[f64], frozen_norm: Option<f64>) -> Result<Var> {
        let pi = self.check(p)?;
        let pv = self.nodes[pi].value.data();
        if pv.len() != targets.len() {
            return Err(Error::dim("rank_loss", "0", pv.len(), targets.len()));
        }
        let r = crate::training::ranking_matrix(pv, targets);
        let max_abs = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let norm = frozen_norm.unwrap_or(max_abs);
        let n = pv.len() as f64;
        let positive = r.iter().filter(|&&v| v > 0.0).fold(0.0, |a, v| a + v);
        let out = Tensor::scalar(positive / (n * n) / (1.0 + norm));
        Ok(self.push(
            out,
            Op::RankLoss {
                p: pi,
                targets: targets.to_vec(),
                norm,
            },
            &[pi],
        ))
    }

    /// Accumulates `d loss / d node` for every node that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        self.grads[li] = Some(vec![1.0]);
        for idx in (0..=li).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        // Intermediate nodes that never received a contribution still get a
        // zero gradient so every differentiable node is populated.
        for (node, grad) in self.nodes[..=li].iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && grad.is_none() {
                *grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, f: impl FnOnce(&mut [f64], &Tensor)) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let value = &self.nodes[target].value;
        let slot = self.grads[target].get_or_insert_with(|| vec![0.0; value.len()]);
        f(slot, value);
    }

    fn add_into(&mut self, target: usize, delta: &[f64]) {
        self.accumulate(target, |acc, _| {
            acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
        });
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) -> Result<()> {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let result = self.backprop_op(idx, &op, g);
        self.nodes[idx].op = op;
        result
    }

    fn backprop_op(&mut self, idx: usize, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let want = [self.nodes[x].requires_grad, self.nodes[w].requires_grad, self.nodes[b].requires_grad];
                let grads = kernels::conv2d_backward(
                    &self.nodes[x].value,
                    &self.nodes[w].value,
                    &self.nodes[b].value,
                    stride,
                    pad,
                    g,
                    want,
                )?;
                if let Some(dx) = grads.input {
                    self.add_into(x, &dx);
                }
                if let Some(dw) = grads.weight {
                    self.add_into(w, &dw);
                }
                if let Some(db) = grads.bias {
                    self.add_into(b, &db);
                }
            }
            Op::Relu(x) => self.accumulate(x, |acc, v| {
                for ((a, &xv), &gv) in acc.iter_mut().zip(v.data()).zip(g) {
                    if xv > 0.0 {
                        *a += gv;
                    }
                }
            }),
            Op::Sigmoid(x) => {
                let out = self.nodes[idx].value.data().to_vec();
                self.accumulate(x, |acc, _| {
                    for ((a, &s), &gv) in acc.iter_mut().zip(&out).zip(g) {
                        *a += gv * s * (1.0 - s);
                    }
                })
            }
            Op::Clamp01(x) => self.accumulate(x, |acc, v| {
                for ((a, &xv), &gv) in acc.iter_mut().zip(v.data()).zip(g) {
                    if xv > 0.0 && xv < 1.0 {
                        *a += gv;
                    }
                }
            }),
            Op::AvgPool2(x) => {
                let dx = kernels::avg_pool2_backward(self.nodes[x].value.shape(), g);
                self.add_into(x, &dx);
            }
            Op::Upsample2(x) => {
                let dx = kernels::upsample2_backward(self.nodes[x].value.shape(), g);
                self.add_into(x, &dx);
            }
            Op::GlobalAvgPool(x) => self.accumulate(x, |acc, v| {
                let hw = v.shape()[2] * v.shape()[3];
                let inv = 1.0 / hw as f64;
                for (plane, &gv) in acc.chunks_exact_mut(hw).zip(g) {
                    plane.iter_mut().for_each(|a| *a += gv * inv);
                }
            }),
            Op::Linear { x, w, b } => {
                let d_in = self.nodes[w].value.shape()[1];
                let d_out = self.nodes[w].value.shape()[0];
                if self.nodes[x].requires_grad {
                    let wv = self.nodes[w].value.data().to_vec();
                    self.accumulate(x, |acc, _| {
                        for (row, grow) in acc.chunks_exact_mut(d_in).zip(g.chunks_exact(d_out)) {
                            for (o, &go) in grow.iter().enumerate() {
                                for (a, wv) in row.iter_mut().zip(&wv[o * d_in..(o + 1) * d_in]) {
                                    *a += go * wv;
                                }
                            }
                        }
                    });
                }
                if self.nodes[w].requires_grad {
                    let xv = self.nodes[x].value.data().to_vec();
                    self.accumulate(w, |acc, _| {
                        for (xrow, grow) in xv.chunks_exact(d_in).zip(g.chunks_exact(d_out)) {
                            for (o, &go) in grow.iter().enumerate() {
                                for (a, xv) in acc[o * d_in..(o + 1) * d_in].iter_mut().zip(xrow) {
                                    *a += go * xv;
                                }
                            }
                        }
                    });
                }
                self.accumulate(b, |acc, _| {
                    for grow in g.chunks_exact(d_out) {
                        acc.iter_mut().zip(grow).for_each(|(a, gv)| *a += gv);
                    }
                });
            }
            Op::Add(a, b) => {
                self.add_into(a, g);
                self.add_into(b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(a, g);
                self.accumulate(b, |acc, _| acc.iter_mut().zip(g).for_each(|(a, gv)| *a -= gv));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a].value.data().to_vec();
                let bv = self.nodes[b].value.data().to_vec();
                self.accumulate(a, |acc, _| {
                    for ((s, gv), bv) in acc.iter_mut().zip(g).zip(&bv) {
                        *s += gv * bv;
                    }
                });
                self.accumulate(b, |acc, _| {
                    for ((s, gv), av) in acc.iter_mut().zip(g).zip(&av) {
                        *s += gv * av;
                    }
                });
            }
            Op::MulScalar(x, s) => self.accumulate(x, |acc, _| acc.iter_mut().zip(g).for_each(|(a, gv)| *a += gv * s)),
            Op::AddScalar(x) | Op::Reshape(x) => self.add_into(x, g),
            Op::Concat(a, b) => {
                let sa = self.nodes[a].value.shape().to_vec();
                let cb = self.nodes[b].value.shape()[1];
                let (n, ca, hw) = (sa[0], sa[1], sa[2] * sa[3]);
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for chunk in g.chunks_exact((ca + cb) * hw) {
                    ga.extend_from_slice(&chunk[..ca * hw]);
                    gb.extend_from_slice(&chunk[ca * hw..]);
                }
                self.add_into(a, &ga);
                self.add_into(b, &gb);
            }
            Op::Tile(x) => self.accumulate(x, |acc, _| {
                for chunk in g.chunks_exact(acc.len()) {
                    acc.iter_mut().zip(chunk).for_each(|(a, gv)| *a += gv);
                }
            }),
            Op::Sum(x) => self.accumulate(x, |acc, _| acc.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => self.accumulate(x, |acc, _| {
                let s = g[0] / acc.len() as f64;
                acc.iter_mut().for_each(|a| *a += s);
            }),
            Op::Square(x) => self.accumulate(x, |acc, v| {
                for ((a, &xv), gv) in acc.iter_mut().zip(v.data()).zip(g) {
                    *a += 2.0 * xv * gv;
                }
            }),
            Op::Mse(a, b) => {
                let n = self.nodes[a].value.len() as f64;
                let diff: Vec<f64> = self.nodes[a]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[b].value.data())
                    .map(|(x, y)| 2.0 * (x - y) / n * g[0])
                    .collect();
                self.add_into(a, &diff);
                self.accumulate(b, |acc, _| acc.iter_mut().zip(&diff).for_each(|(s, d)| *s -= d));
            }
            Op::L2Norm(x) => {
                let norm = self.nodes[idx].value.item();
                if norm > 0.0 {
                    self.accumulate(x, |acc, v| {
                        for (a, xv) in acc.iter_mut().zip(v.data()) {
                            *a += g[0] * xv / norm;
                        }
                    });
                }
            }
            Op::RankLoss { p, ref targets, norm } => {
                let n = targets.len();
                let scale = g[0] / (n * n) as f64 / (1.0 + norm);
                let pv = self.nodes[p].value.data();
                let mut dp = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let s = sign(targets[j] - targets[i]);
                        if (pv[i] - pv[j]) * s > 0.0 {
                            dp[i] += s * scale;
                            dp[j] -= s * scale;
                        }
                    }
                }
                self.add_into(p, &dp);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Sign with `sign(0) = 0`.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
