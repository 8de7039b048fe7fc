//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] appends one node per primitive in evaluation order, so node ids
//! are a topological order by construction. [`Tape::backward`] walks the
//! nodes in reverse from a scalar loss and returns one gradient per
//! registered parameter, keyed by group name.

use crate::error::{Result, RoseError};
use crate::params::ParamSet;
use crate::rng::{dropout_mask, RngStream};
use crate::tensor::{self, Tensor};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Dropout(NodeId, Tensor),
    LogSoftmax(NodeId),
    Gather(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    /// Batch mean of `KL(p||q) + KL(q||p)` from two log-probability inputs.
    SymKl(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    /// Differentiable leaf reported by [`Tape::backward`] under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(Op::Param(name.into()), value, true)
    }

    /// Registers every group of `params` and returns their node ids in order.
    pub fn params(&mut self, params: &ParamSet) -> Vec<NodeId> {
        params
            .iter()
            .map(|(name, t)| self.param(name, t.clone()))
            .collect()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    /// Elementwise sum of equal shapes, or a bias row broadcast over the batch.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let rg = self.needs(&[a, b]);
        let (va, vb) = (self.value(a), self.value(b));
        if va.same_shape(vb) {
            let v = va.zip_map(vb, |x, y| x + y);
            Ok(self.push(Op::Add(a, b), v, rg))
        } else {
            let v = tensor::add_row(va, vb)?;
            Ok(self.push(Op::AddRow(a, b), v, rg))
        }
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(RoseError::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let v = va.zip_map(vb, |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c * x);
        let rg = self.needs(&[a]);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(Op::Tanh(a), v, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.needs(&[a]);
        self.push(Op::Relu(a), v, rg)
    }

    /// Inverted dropout with the mask drawn from `rng` at `site`. A zero rate
    /// records nothing and returns `a`.
    pub fn dropout(
        &mut self,
        a: NodeId,
        rng: &RngStream,
        site: usize,
        rate: f64,
    ) -> Result<NodeId> {
        if rate == 0.0 {
            return Ok(a);
        }
        let mask = dropout_mask(rng, site, self.value(a).shape(), rate)?;
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Dropout(a, mask), v, rg))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::log_softmax_rows(self.value(a))?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::LogSoftmax(a), v, rg))
    }

    /// Picks `x[r, labels[r]]` for every row, giving a `[batch]` tensor.
    pub fn gather(&mut self, a: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, c) = self.value(a).dims2("gather")?;
        if labels.len() != n {
            return Err(RoseError::shape(
                "gather",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(RoseError::data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let x = self.value(a);
        let data = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| x.row(r)[l])
            .collect();
        let v = Tensor::new(vec![n], data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Gather(a, labels.to_vec()), v, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.needs(&[a]);
        self.push(Op::Sum(a), v, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64);
        let rg = self.needs(&[a]);
        self.push(Op::Mean(a), v, rg)
    }

    /// Symmetric KL between rows of two log-probability tensors, averaged
    /// over the batch. Log terms are floored at `ln(PROB_FLOOR)`.
    pub fn sym_kl(&mut self, lp: NodeId, lq: NodeId) -> Result<NodeId> {
        let (p, q) = (self.value(lp), self.value(lq));
        let (n, _) = p.dims2("sym_kl")?;
        if !p.same_shape(q) {
            return Err(RoseError::shape(
                "sym_kl",
                format!("{:?} vs {:?}", p.shape(), q.shape()),
            ));
        }
        let floor = PROB_FLOOR.ln();
        let total: f64 = p
            .data()
            .iter()
            .zip(q.data())
            .map(|(&a, &b)| (a.exp() - b.exp()) * (a.max(floor) - b.max(floor)))
            .sum();
        let rg = self.needs(&[lp, lq]);
        Ok(self.push(Op::SymKl(lp, lq), Tensor::scalar(total / n as f64), rg))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter
    /// leaf on the tape, in registration order. Parameters the loss does not
    /// depend on receive zeros.
    pub fn backward(&self, loss: NodeId) -> Result<ParamSet> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(RoseError::shape(
                "backward",
                format!(
                    "loss node must be scalar, got shape {:?}",
                    root.value.shape()
                ),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(_) => adj[i] = Some(g),
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da = tensor::matmul_nt(&g, self.value(*b));
                        accumulate(&mut adj, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = tensor::matmul_tn(self.value(*a), &g);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::AddRow(a, b) => {
                    let (n, m) = (g.shape()[0], g.shape()[1]);
                    let mut col = vec![0.0; m];
                    for r in 0..n {
                        for (c, v) in col.iter_mut().zip(g.row(r)) {
                            *c += v;
                        }
                    }
                    let db = Tensor::new(self.value(*b).shape().to_vec(), col)?;
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *b, db);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |gv, y| gv * y);
                    let db = g.zip_map(self.value(*a), |gv, x| gv * x);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.map(|x| c * x)),
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut adj, *a, d);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut adj, *a, d);
                }
                Op::Dropout(a, mask) => accumulate(&mut adj, *a, g.zip_map(mask, |gv, m| gv * m)),
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let (n, m) = (y.shape()[0], y.shape()[1]);
                    let mut d = Vec::with_capacity(n * m);
                    for r in 0..n {
                        let gr = g.row(r);
                        let s: f64 = gr.iter().sum();
                        d.extend(gr.iter().zip(y.row(r)).map(|(gv, yv)| gv - yv.exp() * s));
                    }
                    accumulate(&mut adj, *a, Tensor::new(vec![n, m], d)?);
                }
                Op::Gather(a, labels) => {
                    let shape = self.value(*a).shape().to_vec();
                    let m = shape[1];
                    let mut d = vec![0.0; shape[0] * m];
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * m + l] = g.data()[r];
                    }
                    accumulate(&mut adj, *a, Tensor::new(shape, d)?);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut adj, *a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let gv = g.data()[0] / x.len() as f64;
                    accumulate(&mut adj, *a, Tensor::full(x.shape(), gv));
                }
                Op::SymKl(lp, lq) => {
                    let (p, q) = (self.value(*lp), self.value(*lq));
                    let n = p.shape()[0] as f64;
                    let scale = g.data()[0] / n;
                    let floor = PROB_FLOOR.ln();
                    let mut dp = Vec::with_capacity(p.len());
                    let mut dq = Vec::with_capacity(q.len());
                    for (&a, &b) in p.data().iter().zip(q.data()) {
                        let (pa, qb) = (a.exp(), b.exp());
                        let diff_log = a.max(floor) - b.max(floor);
                        let diff_p = pa - qb;
                        let active_p = if a > floor { 1.0 } else { 0.0 };
                        let active_q = if b > floor { 1.0 } else { 0.0 };
                        dp.push(scale * (pa * diff_log + diff_p * active_p));
                        dq.push(scale * (-qb * diff_log - diff_p * active_q));
                    }
                    accumulate(&mut adj, *lp, Tensor::new(p.shape().to_vec(), dp)?);
                    accumulate(&mut adj, *lq, Tensor::new(q.shape().to_vec(), dq)?);
                }
            }
        }

        let mut grads = ParamSet::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(name) = &node.op {
                let g = adj[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                grads.insert(name.clone(), g)?;
            }
        }
        // Parameters registered after the loss node cannot influence it.
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Param(name) = &node.op {
                grads.insert(name.clone(), Tensor::zeros(node.value.shape()))?;
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
