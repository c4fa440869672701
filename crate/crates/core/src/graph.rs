//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! parents have strictly smaller ids, so reverse id order is a valid
//! topological order for the backward sweep. Build a fresh graph for every
//! forward pass. Parameters live in a [`ParamStore`] and enter the graph as
//! leaves; [`Graph::backward`] adds their gradients into the store.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, log, log1p, sqrt, tanh};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Affine(NodeId, f64),
    Concat(NodeId, NodeId),
    Column(NodeId, usize),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        input: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    EmbeddingBag {
        table: NodeId,
        bags: Vec<Vec<usize>>,
        mean: bool,
    },
    Sum(NodeId),
    Mean(NodeId),
    BceLogits {
        logits: NodeId,
        targets: Tensor,
    },
    BceProbs {
        probs: NodeId,
        targets: Tensor,
    },
    CeLogits {
        logits: NodeId,
        targets: Tensor,
    },
    CeProbs {
        probs: NodeId,
        targets: Tensor,
    },
    KlUniform(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + log1p(exp(-x.abs()))
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = exp(v - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + log(row.iter().map(|&v| exp(v - max)).sum::<f64>())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_binary(targets: &Tensor) -> Result<()> {
    match targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        Some(t) => Err(Error::invalid(
            "targets",
            format!("expected values in {{0, 1}}, found {t}"),
        )),
        None => Ok(()),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf. Its gradient is computed but goes nowhere.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let node = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes[node.0].param = Some(id);
        node
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Gradient of the last backward pass with respect to `id`, if reachable.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        gemm_acc(va.data(), vb.data(), &mut out, m, k, n);
        let shape = if va.shape().len() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = va.same_layout(data);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a bias row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::shape("add_bias", va.shape(), vb.shape()));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    /// Multiplies every entry of `a` by the single-element node `s`.
    pub fn scale(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (va, vs) = (self.value(a), self.value(s));
        if !vs.is_scalar() {
            return Err(Error::shape("scale", va.shape(), vs.shape()));
        }
        let factor = vs.data()[0];
        let value = va.map(|x| x * factor);
        Ok(self.push(value, Op::Scale(a, s)))
    }

    /// Multiplies row `r` of `a` by `s[r]`, with `s` of shape `rows x 1`.
    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (va, vs) = (self.value(a), self.value(s));
        if vs.cols() != 1 || vs.len() != va.rows() {
            return Err(Error::shape("scale_rows", va.shape(), vs.shape()));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            let f = vs.data()[r];
            value.row_mut(r).iter_mut().for_each(|x| *x *= f);
        }
        Ok(self.push(value, Op::ScaleRows(a, s)))
    }

    /// `mul * a + add`, elementwise with constant coefficients.
    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let value = self.value(a).map(|x| mul * x + add);
        self.push(value, Op::Affine(a, mul))
    }

    /// Concatenates along the trailing (feature) axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != vb.shape().len() || va.rows() != vb.rows() {
            return Err(Error::shape("concat", va.shape(), vb.shape()));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let shape = if va.shape().len() == 1 {
            vec![ca + cb]
        } else {
            vec![va.rows(), ca + cb]
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    /// Column `j` of a matrix as a `rows x 1` node.
    pub fn column(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let va = self.value(a);
        if j >= va.cols() {
            return Err(Error::shape("column", va.shape(), &[j]));
        }
        let data = (0..va.rows()).map(|r| va.get(r, j)).collect();
        let value = Tensor::matrix(va.rows(), 1, data)?;
        Ok(self.push(value, Op::Column(a, j)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid_f);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Softmax over the trailing axis of every row.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..va.rows() {
            softmax_row(va.row(r), value.row_mut(r));
        }
        self.push(value, Op::Softmax(a))
    }

    /// Per-row layer normalization with population variance, followed by an
    /// optional affine map `gamma * x_hat + beta`.
    pub fn layernorm(
        &mut self,
        a: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        eps: f64,
    ) -> Result<NodeId> {
        let va = self.value(a);
        let f = va.cols();
        for p in [gamma, beta].into_iter().flatten() {
            let vp = self.value(p);
            if vp.len() != f || vp.rows() != 1 {
                return Err(Error::shape("layernorm", va.shape(), vp.shape()));
            }
        }
        let mut normalized = va.clone();
        let mut inv_std = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let row = va.row(r);
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / f as f64;
            let is = 1.0 / sqrt(var + eps);
            for (o, &x) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let mut value = normalized.clone();
        if let Some(g) = gamma {
            let g = self.value(g).data().to_vec();
            for r in 0..value.rows() {
                value
                    .row_mut(r)
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(x, g)| *x *= g);
            }
        }
        if let Some(b) = beta {
            let b = self.value(b).data().to_vec();
            for r in 0..value.rows() {
                value
                    .row_mut(r)
                    .iter_mut()
                    .zip(&b)
                    .for_each(|(x, b)| *x += b);
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// Pools rows of `table` per bag: one output row per bag, summed or averaged.
    pub fn embedding_bag(
        &mut self,
        table: NodeId,
        bags: Vec<Vec<usize>>,
        mean: bool,
    ) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::shape("embedding_bag", vt.shape(), &[]));
        }
        let (vocab, dim) = (vt.rows(), vt.cols());
        if bags.is_empty() {
            return Err(Error::invalid("token bags", "batch is empty"));
        }
        let mut data = vec![0.0; bags.len() * dim];
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::invalid(
                    "token sequence",
                    format!("sample {b} has no tokens"),
                ));
            }
            let out = &mut data[b * dim..(b + 1) * dim];
            for &t in bag {
                if t >= vocab {
                    return Err(Error::invalid(
                        "token id",
                        format!("id {t} out of vocabulary of size {vocab}"),
                    ));
                }
                out.iter_mut().zip(vt.row(t)).for_each(|(o, e)| *o += e);
            }
            if mean {
                let n = bag.len() as f64;
                out.iter_mut().for_each(|o| *o /= n);
            }
        }
        let value = Tensor::matrix(bags.len(), dim, data)?;
        Ok(self.push(value, Op::EmbeddingBag { table, bags, mean }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let m = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Multilabel binary cross-entropy: summed over labels, averaged over rows.
    ///
    /// When `probs` was produced by [`Graph::sigmoid`] the loss is evaluated
    /// from the underlying logits; otherwise probabilities are clamped.
    pub fn bce_loss(&mut self, probs: NodeId, targets: &Tensor) -> Result<NodeId> {
        let vp = self.value(probs);
        if vp.shape() != targets.shape() {
            return Err(Error::shape("bce_loss", vp.shape(), targets.shape()));
        }
        check_binary(targets)?;
        let rows = vp.rows() as f64;
        if let Op::Sigmoid(logits) = self.nodes[probs.0].op {
            let z = self.value(logits);
            let total: f64 = z
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&z, &t)| softplus(z) - t * z)
                .sum();
            let op = Op::BceLogits {
                logits,
                targets: targets.clone(),
            };
            return Ok(self.push(Tensor::scalar(total / rows), op));
        }
        let total: f64 = vp
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| {
                let p = clamp_prob(p);
                -(t * log(p) + (1.0 - t) * log(1.0 - p))
            })
            .sum();
        let op = Op::BceProbs {
            probs,
            targets: targets.clone(),
        };
        Ok(self.push(Tensor::scalar(total / rows), op))
    }

    /// Categorical cross-entropy against one-hot rows, averaged over rows.
    ///
    /// Evaluated from logits when `probs` came from [`Graph::softmax`].
    pub fn ce_loss(&mut self, probs: NodeId, targets: &Tensor) -> Result<NodeId> {
        let vp = self.value(probs);
        if vp.shape() != targets.shape() {
            return Err(Error::shape("ce_loss", vp.shape(), targets.shape()));
        }
        check_binary(targets)?;
        for r in 0..targets.rows() {
            if targets.row(r).iter().sum::<f64>() != 1.0 {
                return Err(Error::invalid("targets", format!("row {r} is not one-hot")));
            }
        }
        let rows = vp.rows() as f64;
        if let Op::Softmax(logits) = self.nodes[probs.0].op {
            let z = self.value(logits);
            let total: f64 = (0..z.rows())
                .map(|r| {
                    let lse = log_sum_exp(z.row(r));
                    z.row(r)
                        .iter()
                        .zip(targets.row(r))
                        .map(|(&z, &t)| t * (lse - z))
                        .sum::<f64>()
                })
                .sum();
            let op = Op::CeLogits {
                logits,
                targets: targets.clone(),
            };
            return Ok(self.push(Tensor::scalar(total / rows), op));
        }
        let total: f64 = vp
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| -t * log(clamp_prob(p)))
            .sum();
        let op = Op::CeProbs {
            probs,
            targets: targets.clone(),
        };
        Ok(self.push(Tensor::scalar(total / rows), op))
    }

    /// `sum_rows sum_m p_m ln(p_m / (1/M))` for a `rows x M` matrix of
    /// distributions, i.e. the KL divergence of each row from the uniform
    /// distribution, summed over rows.
    pub fn kl_to_uniform(&mut self, p: NodeId) -> NodeId {
        let vp = self.value(p);
        let m = vp.cols() as f64;
        let total: f64 = vp
            .data()
            .iter()
            .map(|&x| {
                let x = clamp_prob(x);
                x * log(x * m)
            })
            .sum();
        self.push(Tensor::scalar(total), Op::KlUniform(p))
    }

    /// Runs the backward sweep from a scalar `loss` and adds the gradients of
    /// every parameter leaf into `store`. Graph-level gradients from a
    /// previous call are discarded; store gradients accumulate until
    /// [`ParamStore::zero_grad`].
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }

        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(pid), Some(g)) = (node.param, grad) {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |id: NodeId| &nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let mut ga = vec![0.0; m * k];
                gemm_bt_acc(g.data(), vb.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                gemm_at_acc(va.data(), g.data(), &mut gb, m, k, n);
                let (ga, gb) = (va.same_layout(ga), vb.same_layout(gb));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddBias(a, b) => {
                let vb = val(*b);
                let mut gb = vec![0.0; vb.len()];
                for r in 0..g.rows() {
                    gb.iter_mut().zip(g.row(r)).for_each(|(o, x)| *o += x);
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, vb.same_layout(gb));
            }
            Op::Scale(a, s) => {
                let (va, vs) = (val(*a), val(*s));
                let factor = vs.data()[0];
                let gs: f64 = g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                accumulate(grads, *a, g.map(|x| x * factor));
                accumulate(grads, *s, vs.same_layout(vec![gs]));
            }
            Op::ScaleRows(a, s) => {
                let (va, vs) = (val(*a), val(*s));
                let mut ga = g.clone();
                let mut gs = vec![0.0; vs.len()];
                for r in 0..g.rows() {
                    let f = vs.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= f);
                    gs[r] = g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum();
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *s, vs.same_layout(gs));
            }
            Op::Affine(a, mul) => {
                let mul = *mul;
                accumulate(grads, *a, g.map(|x| x * mul));
            }
            Op::Concat(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ca = va.cols();
                let mut ga = Vec::with_capacity(va.len());
                let mut gb = Vec::with_capacity(vb.len());
                for r in 0..g.rows() {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                let (ga, gb) = (va.same_layout(ga), vb.same_layout(gb));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Column(a, j) => {
                let va = val(*a);
                let mut ga = Tensor::zeros(va.shape());
                let c = va.cols();
                for r in 0..va.rows() {
                    ga.data_mut()[r * c + j] = g.data()[r];
                }
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(grads, *a, y.same_layout(data));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                accumulate(grads, *a, y.same_layout(data));
            }
            Op::Relu(a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, x.same_layout(data));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = y.clone();
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(g, y)| g * y).sum();
                    for ((o, &gy), &yy) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yy * (gy - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let f = normalized.cols();
                let fl = f as f64;
                let gamma_v = gamma.map(|id| val(id).data().to_vec());
                let mut gx = normalized.clone();
                let mut g_gamma = vec![0.0; f];
                let mut g_beta = vec![0.0; f];
                let mut dxhat = vec![0.0; f];
                for r in 0..normalized.rows() {
                    let (gr, xh) = (g.row(r), normalized.row(r));
                    for c in 0..f {
                        g_gamma[c] += gr[c] * xh[c];
                        g_beta[c] += gr[c];
                        dxhat[c] = match &gamma_v {
                            Some(gm) => gr[c] * gm[c],
                            None => gr[c],
                        };
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / fl;
                    let mean_dx = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / fl;
                    let is = inv_std[r];
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
                accumulate(grads, *input, gx);
                if let Some(gm) = gamma {
                    let t = val(*gm).same_layout(g_gamma);
                    accumulate(grads, *gm, t);
                }
                if let Some(bt) = beta {
                    let t = val(*bt).same_layout(g_beta);
                    accumulate(grads, *bt, t);
                }
            }
            Op::EmbeddingBag { table, bags, mean } => {
                let vt = val(*table);
                let mut gt = Tensor::zeros(vt.shape());
                for (b, bag) in bags.iter().enumerate() {
                    let scale = if *mean { 1.0 / bag.len() as f64 } else { 1.0 };
                    let gr = g.row(b);
                    for &t in bag {
                        gt.row_mut(t)
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(o, x)| *o += scale * x);
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(grads, *a, Tensor::filled(val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let va = val(*a);
                let s = g.data()[0] / va.len() as f64;
                accumulate(grads, *a, Tensor::filled(va.shape(), s));
            }
            Op::BceLogits { logits, targets } => {
                let z = val(*logits);
                let s = g.data()[0] / z.rows() as f64;
                let data = z
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| s * (sigmoid_f(z) - t))
                    .collect();
                accumulate(grads, *logits, z.same_layout(data));
            }
            Op::BceProbs { probs, targets } => {
                let p = val(*probs);
                let s = g.data()[0] / p.rows() as f64;
                let data = p
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&p, &t)| {
                        if clamp_prob(p) != p {
                            0.0
                        } else {
                            s * (-t / p + (1.0 - t) / (1.0 - p))
                        }
                    })
                    .collect();
                accumulate(grads, *probs, p.same_layout(data));
            }
            Op::CeLogits { logits, targets } => {
                let z = val(*logits);
                let s = g.data()[0] / z.rows() as f64;
                let mut gz = z.clone();
                for r in 0..z.rows() {
                    softmax_row(z.row(r), gz.row_mut(r));
                    for (o, &t) in gz.row_mut(r).iter_mut().zip(targets.row(r)) {
                        *o = s * (*o - t);
                    }
                }
                accumulate(grads, *logits, gz);
            }
            Op::CeProbs { probs, targets } => {
                let p = val(*probs);
                let s = g.data()[0] / p.rows() as f64;
                let data = p
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&p, &t)| if clamp_prob(p) != p { 0.0 } else { -s * t / p })
                    .collect();
                accumulate(grads, *probs, p.same_layout(data));
            }
            Op::KlUniform(a) => {
                let p = val(*a);
                let m = p.cols() as f64;
                let s = g.data()[0];
                let data = p
                    .data()
                    .iter()
                    .map(|&x| {
                        if clamp_prob(x) != x {
                            0.0
                        } else {
                            s * (log(x * m) + 1.0)
                        }
                    })
                    .collect();
                accumulate(grads, *a, p.same_layout(data));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.input(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.input(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let p = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.input(mat(1, 2, &[1.0, 2.0]));
        let c = g.input(mat(2, 1, &[3.0, 4.0]));
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1]);
        assert_eq!(g.value(p).data(), &[11.0]);

        let z = g.input(Tensor::zeros(&[2, 2]));
        let p = g.matmul(z, a).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0]));
        let b = g.input(Tensor::vector(vec![3.0]));
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(g.value(c).shape(), &[3]);

        let x = g.input(Tensor::vector(vec![2.0, 4.0]));
        let half = g.input(Tensor::scalar(0.5));
        let s = g.scale(x, half).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0]);

        let ones = g.input(Tensor::vector(vec![1.0, 1.0]));
        let zeros = g.input(Tensor::vector(vec![0.0, 0.0]));
        let sum = g.add(ones, zeros).unwrap();
        assert_eq!(g.value(sum).data(), &[1.0, 1.0]);

        let bad = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(g.add(ones, bad).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut g = Graph::new();
        let zero = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(zero);
        assert_eq!(g.scalar(s), 0.5);

        let ln3 = g.input(Tensor::scalar(libm::log(3.0)));
        let s = g.sigmoid(ln3);
        assert_abs_diff_eq!(g.scalar(s), 0.75, epsilon = 1e-15);

        let zz = g.input(Tensor::vector(vec![7.5, 7.5]));
        let sm = g.softmax(zz);
        assert_eq!(g.value(sm).data(), &[0.5, 0.5]);

        let big = g.input(Tensor::vector(vec![1000.0, -1000.0, 0.0]));
        let sm = g.softmax(big);
        assert!(g.value(sm).is_finite());
        let sg = g.sigmoid(big);
        assert_eq!(g.value(sg).data()[0], 1.0);
        assert_eq!(g.value(sg).data()[1], 0.0);
    }

    #[test]
    fn layernorm_examples() {
        let mut g = Graph::new();
        let x = g.input(mat(1, 3, &[1.0, 2.0, 3.0]));
        let y = g.layernorm(x, None, None, 1e-5).unwrap();
        let v = g.value(y).data().to_vec();
        assert_abs_diff_eq!(v[0], -1.2247, epsilon = 1e-3);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], 1.2247, epsilon = 1e-3);

        let c = g.input(mat(1, 3, &[5.0, 5.0, 5.0]));
        let y = g.layernorm(c, None, None, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gamma = g.input(Tensor::vector(vec![0.0; 3]));
        let beta = g.input(Tensor::vector(vec![0.1, -0.2, 0.3]));
        let y = g.layernorm(x, Some(gamma), Some(beta), 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let t1 = mat(1, 1, &[1.0]);
        let t0 = mat(1, 1, &[0.0]);

        let p = g.input(mat(1, 1, &[0.5]));
        let l = g.bce_loss(p, &t1).unwrap();
        assert_abs_diff_eq!(g.scalar(l), core::f64::consts::LN_2, epsilon = 1e-15);

        let p = g.input(mat(1, 1, &[1.0 - 1e-12]));
        let l = g.bce_loss(p, &t1).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.0, epsilon = 1e-11);

        let p = g.input(mat(1, 1, &[0.25]));
        let l = g.bce_loss(p, &t0).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.2876820724517809, epsilon = 1e-12);

        // logit route agrees with the probability route
        let z = g.input(mat(1, 1, &[libm::log(1.0 / 3.0)]));
        let p = g.sigmoid(z);
        let l = g.bce_loss(p, &t0).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.2876820724517809, epsilon = 1e-12);

        let bad = mat(1, 1, &[0.5]);
        assert!(matches!(g.bce_loss(p, &bad), Err(Error::Invalid { .. })));
    }

    #[test]
    fn ce_loss_logit_and_prob_routes_agree() {
        let mut g = Graph::new();
        let z = g.input(mat(2, 3, &[0.2, -1.0, 3.0, 0.0, 0.5, 0.1]));
        let t = mat(2, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let p = g.softmax(z);
        let via_logits = g.ce_loss(p, &t).unwrap();
        let raw = g.input(g.value(p).clone());
        let via_probs = g.ce_loss(raw, &t).unwrap();
        assert_abs_diff_eq!(g.scalar(via_logits), g.scalar(via_probs), epsilon = 1e-12);

        let not_one_hot = mat(2, 3, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(g.ce_loss(p, &not_one_hot).is_err());
    }

    #[test]
    fn backward_examples() {
        // loss = sum(w * x) with x fixed: dw == x
        let mut store = ParamStore::new();
        let w = store.add("w", mat(1, 3, &[0.3, -0.2, 0.9])).unwrap();
        let unused = store.add("unused", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let _ = g.param(&store, unused);
        let x = g.input(mat(3, 1, &[1.5, 2.5, -4.0]));
        let wx = g.matmul(wn, x).unwrap();
        let loss = g.sum(wx);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[1.5, 2.5, -4.0]);
        assert_eq!(g.grad(loss).unwrap().data(), &[1.0]);
        assert!(store.grad(unused).data().iter().all(|&v| v == 0.0));

        // repeated backward accumulates
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[3.0, 5.0, -8.0]);
        store.zero_grad();
        assert!(store.grad(w).data().iter().all(|&v| v == 0.0));

        // sigmoid'(0) = 0.25
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.0)).unwrap();
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let s = g.sigmoid(wn);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x, &mut ParamStore::new()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kl_to_uniform_values() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.5, 0.5]));
        let k = g.kl_to_uniform(p);
        assert_eq!(g.scalar(k), 0.0);
        let p = g.input(Tensor::vector(vec![0.9, 0.1]));
        let k = g.kl_to_uniform(p);
        let expected = 0.9 * libm::log(1.8) + 0.1 * libm::log(0.2);
        assert_abs_diff_eq!(g.scalar(k), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(g.scalar(k), 0.3681, epsilon = 1e-4);
    }
}
