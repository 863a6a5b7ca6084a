//! Tensor-level reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so index order is a topological
//! order and the backward sweep simply walks the indices downwards.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise_rng::NoiseStream;
use crate::normalization::{ConventionalCache, ConventionalNorm, ForwardCache, NormalityNorm};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Below this many multiply-adds a matrix product stays on one thread.
const PAR_MIN_FLOPS: usize = 1 << 16;

/// Learnable parameter of an [`super::Mlp`]; the index is the dense layer
/// (hidden layers first, the classifier head last).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamRef {
    Weight(usize),
    Bias(usize),
    Gamma(usize),
    Beta(usize),
}

impl std::fmt::Display for ParamRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamRef::Weight(l) => write!(f, "dense{l}.weight"),
            ParamRef::Bias(l) => write!(f, "dense{l}.bias"),
            ParamRef::Gamma(l) => write!(f, "norm{l}.gamma"),
            ParamRef::Beta(l) => write!(f, "norm{l}.beta"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Param(ParamRef),
    /// `[x, w]`, `x: [B, in]`, `w: [in, out]`.
    MatMul,
    /// `[x, b]`.
    AddBias,
    Relu,
    /// `[x, gamma, beta]`.
    Normality { layer: Box<NormalityNorm>, cache: Box<ForwardCache> },
    /// `[x, gamma, beta]`.
    Conventional { layer: Box<ConventionalNorm>, cache: Box<ConventionalCache> },
    /// `[logits]`; the value is the mean loss as a one-element tensor.
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub parents: Vec<NodeId>,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    visited: usize,
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// `x·w` for row-major `x: [b, n]`, `w: [n, m]`.
pub(crate) fn matmul(x: &[f64], w: &[f64], b: usize, n: usize, m: usize) -> Vec<f64> {
    let mut y = vec![0.0; b * m];
    let row = |(r, out): (usize, &mut [f64])| {
        let xr = &x[r * n..(r + 1) * n];
        for (k, &a) in xr.iter().enumerate() {
            if a != 0.0 {
                for (o, &wv) in out.iter_mut().zip(&w[k * m..(k + 1) * m]) {
                    *o += a * wv;
                }
            }
        }
    };
    if b * n * m >= PAR_MIN_FLOPS {
        y.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        y.chunks_mut(m).enumerate().for_each(row);
    }
    y
}

/// Mean softmax cross-entropy and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (b, k) = dims2(logits, "logits")?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = vec![0.0; b * k];
    let mut total = 0.0;
    for r in 0..b {
        let l = &logits.data()[r * k..(r + 1) * k];
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - l[labels[r]];
        for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(l) {
            *p = (v - lse).exp();
        }
    }
    Ok((total / b as f64, probs))
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].grad.as_ref()
    }

    /// Nodes processed by the last [`Self::backward`].
    pub fn visited(&self) -> usize {
        self.visited
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, parents, value, grad: None });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, Vec::new(), value)
    }

    pub fn param(&mut self, p: ParamRef, value: Tensor) -> NodeId {
        self.push(Op::Param(p), Vec::new(), value)
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (b, n) = dims2(self.value(x), "matmul input")?;
        let (n2, m) = dims2(self.value(w), "matmul weight")?;
        if n != n2 {
            return Err(Error::Shape(format!("matmul inner dims {n} vs {n2}")));
        }
        let y = matmul(self.value(x).data(), self.value(w).data(), b, n, m);
        Ok(self.push(Op::MatMul, vec![x, w], Tensor::new(vec![b, m], y)?))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (b, m) = dims2(self.value(x), "bias input")?;
        let bv = self.value(bias).data();
        if bv.len() != m {
            return Err(Error::Shape(format!("bias of length {} for width {m}", bv.len())));
        }
        let y: Vec<f64> =
            self.value(x).data().iter().enumerate().map(|(i, v)| v + bv[i % m]).collect();
        Ok(self.push(Op::AddBias, vec![x, bias], Tensor::new(vec![b, m], y)?))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let y = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect())
            .expect("same shape");
        self.push(Op::Relu, vec![x], y)
    }

    /// Training-mode normality layer. `layer`'s running statistics are folded
    /// in when `update_running` is set.
    pub fn normality(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        layer: &mut NormalityNorm,
        noise: &NoiseStream,
        update_running: bool,
    ) -> Result<NodeId> {
        let (y, cache) = layer.forward_batch_stats(self.value(x), noise)?;
        if update_running {
            layer.update_running(&cache);
        }
        let op = Op::Normality { layer: Box::new(layer.clone()), cache: Box::new(cache) };
        Ok(self.push(op, vec![x, gamma, beta], y))
    }

    pub fn conventional(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        layer: &mut ConventionalNorm,
        update_running: bool,
    ) -> Result<NodeId> {
        let (y, cache) = layer.forward_batch_stats(self.value(x))?;
        if update_running {
            layer.update_running(&cache);
        }
        let op = Op::Conventional { layer: Box::new(layer.clone()), cache: Box::new(cache) };
        Ok(self.push(op, vec![x, gamma, beta], y))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = softmax_cross_entropy(self.value(logits), labels)?;
        let op = Op::SoftmaxCrossEntropy { labels: labels.to_vec(), probs };
        Ok(self.push(op, vec![logits], Tensor::new(vec![1], vec![loss])?))
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        match &mut self.nodes[id].grad {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from the scalar node `root`, seeding its gradient with 1.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root].grad = Some(Tensor::new(vec![1], vec![1.0])?);
        self.visited = 0;
        for id in (0..=root).rev() {
            let Some(g) = self.nodes[id].grad.clone() else { continue };
            self.visited += 1;
            let parents = self.nodes[id].parents.clone();
            let contributions = self.local_grads(id, &g)?;
            for (p, c) in parents.into_iter().zip(contributions) {
                self.accumulate(p, c);
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: NodeId, g: &Tensor) -> Result<Vec<Tensor>> {
        let node = &self.nodes[id];
        let pv = |k: usize| &self.nodes[node.parents[k]].value;
        Ok(match &node.op {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::MatMul => {
                let (x, w) = (pv(0), pv(1));
                let (b, n) = dims2(x, "matmul input")?;
                let m = w.shape()[1];
                let (xd, wd, gd) = (x.data(), w.data(), g.data());
                // grad_x = g·wᵀ
                let mut gx = vec![0.0; b * n];
                let gx_row = |(r, out): (usize, &mut [f64])| {
                    let gr = &gd[r * m..(r + 1) * m];
                    for (k, o) in out.iter_mut().enumerate() {
                        *o = gr.iter().zip(&wd[k * m..(k + 1) * m]).map(|(a, b)| a * b).sum();
                    }
                };
                // grad_w = xᵀ·g, rows accumulated over the batch in order.
                let mut gw = vec![0.0; n * m];
                let gw_row = |(k, out): (usize, &mut [f64])| {
                    for r in 0..b {
                        let a = xd[r * n + k];
                        if a != 0.0 {
                            for (o, &gv) in out.iter_mut().zip(&gd[r * m..(r + 1) * m]) {
                                *o += a * gv;
                            }
                        }
                    }
                };
                if b * n * m >= PAR_MIN_FLOPS {
                    gx.par_chunks_mut(n).enumerate().for_each(gx_row);
                    gw.par_chunks_mut(m).enumerate().for_each(gw_row);
                } else {
                    gx.chunks_mut(n).enumerate().for_each(gx_row);
                    gw.chunks_mut(m).enumerate().for_each(gw_row);
                }
                vec![Tensor::new(vec![b, n], gx)?, Tensor::new(vec![n, m], gw)?]
            }
            Op::AddBias => {
                let m = pv(1).len();
                let mut gb = vec![0.0; m];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % m] += v;
                }
                vec![g.clone(), Tensor::new(vec![m], gb)?]
            }
            Op::Relu => {
                let x = pv(0);
                let gx = x.data().iter().zip(g.data()).map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 });
                vec![Tensor::new(x.shape().to_vec(), gx.collect())?]
            }
            Op::Normality { layer, cache } => {
                let (gx, gg, gb) = layer.backward(cache, g)?;
                let c = gg.len();
                vec![gx, Tensor::new(vec![c], gg)?, Tensor::new(vec![c], gb)?]
            }
            Op::Conventional { layer, cache } => {
                let (gx, gg, gb) = layer.backward(cache, g)?;
                let c = gg.len();
                vec![gx, Tensor::new(vec![c], gg)?, Tensor::new(vec![c], gb)?]
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let logits = pv(0);
                let (b, k) = dims2(logits, "logits")?;
                let scale = g.data()[0] / b as f64;
                let mut gl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * k + y] -= 1.0;
                }
                for v in &mut gl {
                    *v *= scale;
                }
                vec![Tensor::new(vec![b, k], gl)?]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_chain_gradients() {
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = t.param(ParamRef::Weight(0), Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = t.matmul(x, w).unwrap();
        let loss = t.softmax_cross_entropy(y, &[1]).unwrap();
        t.backward(loss).unwrap();
        let p1 = 1.0 / (1.0 + (-1.0f64).exp());
        let gy = [1.0 - p1, p1 - 1.0];
        let gw = t.grad(w).unwrap().data();
        assert!((gw[0] - gy[0]).abs() < 1e-15);
        assert!((gw[3] - 2.0 * gy[1]).abs() < 1e-15);
        assert_eq!(t.visited(), 4);
    }

    #[test]
    fn rejects_bad_labels() {
        let l = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(softmax_cross_entropy(&l, &[2]), Err(Error::Domain(_))));
        assert!(softmax_cross_entropy(&l, &[0, 1]).is_err());
    }
}
