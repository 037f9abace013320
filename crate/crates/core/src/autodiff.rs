//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] is a Wengert list: every primitive application appends a node
//! holding its output value, so nodes are topologically ordered by
//! construction. [`Tape::backward`] walks the list in reverse and accumulates
//! adjoints into the parameter leaves.
//!
//! All reductions sum left to right over the canonical row-major index order,
//! so a given input always produces bit-identical results.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{GradientVector, NamedTensors, Tensor};

pub type NodeId = usize;

/// Which parameter collection a leaf belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Weights,
    Arch,
}

/// Selects the parameters `backward` differentiates with respect to.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSelector {
    All,
    Group(ParamGroup),
    Names(Vec<String>),
}

/// A labelled minibatch: `inputs` is `[n, d]`, `labels[i] < classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "batch inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The single-example batch holding row `i`.
    pub fn example(&self, i: usize) -> Batch {
        Batch {
            inputs: self.inputs.row_slice(i, 1),
            labels: vec![self.labels[i]],
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param {
        name: String,
    },
    /// `x @ w (+ b)` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Replaces every feature of a row by the row mean (dimension preserving).
    MeanPool(NodeId),
    Zero(NodeId),
    Identity(NodeId),
    /// Softmax of a rank-1 score vector.
    Softmax(NodeId),
    /// `sum_m weights[m] * terms[m]`.
    Mix {
        weights: NodeId,
        terms: Vec<NodeId>,
    },
    /// Mean softmax cross-entropy over the rows of `logits`.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    /// Saved activation needed by backward (softmax probabilities).
    saved: Option<Tensor>,
}

/// Ordered record of primitive applications.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<(ParamGroup, String), NodeId>,
    loss: Option<NodeId>,
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
        &self.nodes[id].value
    }

    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn loss(&self) -> Option<f64> {
        self.loss.map(|id| self.nodes[id].value.data()[0])
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let (value, saved) = self.eval(&op)?;
        self.nodes.push(Node { op, value, saved });
        Ok(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value: t,
            saved: None,
        });
        self.nodes.len() - 1
    }

    /// Registers a parameter leaf. Registering the same name twice returns the
    /// existing node so that gradients from every use accumulate.
    pub fn param(&mut self, group: ParamGroup, name: &str, t: &Tensor) -> NodeId {
        let key = (group, name.to_string());
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Param {
                name: name.to_string(),
            },
            value: t.clone(),
            saved: None,
        });
        let id = self.nodes.len() - 1;
        self.params.insert(key, id);
        id
    }

    /// Looks `name` up in `params`, checks its shape, and registers it.
    pub fn param_from(
        &mut self,
        group: ParamGroup,
        params: &NamedTensors,
        name: &str,
        expected_shape: &[usize],
    ) -> Result<NodeId> {
        let t = params.require(name)?;
        if t.shape() != expected_shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: expected_shape.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        Ok(self.param(group, name, t))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.push(Op::Affine { x, w, b })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(x, c))
    }

    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::MeanPool(x))
    }

    pub fn zero(&mut self, like: NodeId) -> Result<NodeId> {
        self.push(Op::Zero(like))
    }

    pub fn identity(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Identity(x))
    }

    pub fn softmax(&mut self, scores: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(scores))
    }

    pub fn mix(&mut self, weights: NodeId, terms: Vec<NodeId>) -> Result<NodeId> {
        self.push(Op::Mix { weights, terms })
    }

    /// Appends the loss node. A tape has exactly one loss.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        if self.loss.is_some() {
            return Err(Error::InvalidArgument(
                "tape already has a loss node".into(),
            ));
        }
        let id = self.push(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })?;
        self.loss = Some(id);
        Ok(id)
    }

    fn eval(&self, op: &Op) -> Result<(Tensor, Option<Tensor>)> {
        let v = |id: NodeId| &self.nodes[id].value;
        let out = match op {
            Op::Constant | Op::Param { .. } => {
                unreachable!("leaves are never evaluated")
            }
            Op::Affine { x, w, b } => {
                let (x, w) = (v(*x), v(*w));
                let (n, inp) = (x.rows(), x.cols());
                if w.shape().len() != 2 || w.shape()[0] != inp {
                    return Err(Error::ShapeMismatch {
                        name: self.node_name(op_input_w(op)),
                        expected: vec![inp, w.cols()],
                        got: w.shape().to_vec(),
                    });
                }
                let out = w.shape()[1];
                let bias = match b {
                    Some(b) => {
                        let bt = v(*b);
                        if bt.shape() != [out] {
                            return Err(Error::ShapeMismatch {
                                name: self.node_name(*b),
                                expected: vec![out],
                                got: bt.shape().to_vec(),
                            });
                        }
                        Some(bt.data())
                    }
                    None => None,
                };
                let (xd, wd) = (x.data(), w.data());
                // Row-major accumulation; every output still sums k in order.
                let mut y = vec![0.0; n * out];
                for (yr, xr) in y.chunks_exact_mut(out).zip(xd.chunks_exact(inp)) {
                    for (&xk, wk) in xr.iter().zip(wd.chunks_exact(out)) {
                        for (acc, &w) in yr.iter_mut().zip(wk) {
                            *acc += xk * w;
                        }
                    }
                    if let Some(bd) = bias {
                        for (acc, &b) in yr.iter_mut().zip(bd) {
                            *acc += b;
                        }
                    }
                }
                (Tensor::from_parts(vec![n, out], y), None)
            }
            Op::Relu(x) => (v(*x).map(|a| a.max(0.0)), None),
            Op::Tanh(x) => (v(*x).map(f64::tanh), None),
            Op::Add(a, b) => {
                let (a, b) = (v(*a), v(*b));
                if a.shape() != b.shape() {
                    return Err(Error::ShapeMismatch {
                        name: "add operand".into(),
                        expected: a.shape().to_vec(),
                        got: b.shape().to_vec(),
                    });
                }
                let data = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
                (Tensor::from_parts(a.shape().to_vec(), data), None)
            }
            Op::Scale(x, c) => (v(*x).map(|a| c * a), None),
            Op::MeanPool(x) => {
                let x = v(*x);
                let (n, d) = (x.rows(), x.cols());
                let mut y = vec![0.0; n * d];
                for r in 0..n {
                    let row = &x.data()[r * d..(r + 1) * d];
                    let m = row.iter().fold(0.0, |acc, a| acc + a) / d as f64;
                    y[r * d..(r + 1) * d].iter_mut().for_each(|o| *o = m);
                }
                (Tensor::from_parts(x.shape().to_vec(), y), None)
            }
            Op::Zero(like) => (Tensor::zeros(v(*like).shape()), None),
            Op::Identity(x) => (v(*x).clone(), None),
            Op::Softmax(a) => (softmax(v(*a).data()), None),
            Op::Mix { weights, terms } => {
                let w = v(*weights);
                if w.len() != terms.len() || terms.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "mix over {} terms with {} weights",
                        terms.len(),
                        w.len()
                    )));
                }
                let shape = v(terms[0]).shape().to_vec();
                let mut y = Tensor::zeros(&shape);
                for (m, &t) in terms.iter().enumerate() {
                    let term = v(t);
                    if term.shape() != shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            name: format!("mixed candidate {m}"),
                            expected: shape,
                            got: term.shape().to_vec(),
                        });
                    }
                    y.axpy(w.data()[m], term);
                }
                (y, None)
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let z = v(*logits);
                let (n, c) = (z.rows(), z.cols());
                if n == 0 {
                    return Err(Error::EmptyBatch);
                }
                if labels.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "{} labels for {n} logit rows",
                        labels.len()
                    )));
                }
                let mut probs = vec![0.0; n * c];
                let mut total = 0.0;
                for r in 0..n {
                    let row = &z.data()[r * c..(r + 1) * c];
                    let y = labels[r];
                    if y >= c {
                        return Err(Error::InvalidArgument(format!("label {y} >= {c} classes")));
                    }
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom = row.iter().fold(0.0, |acc, a| acc + (a - max).exp());
                    let lse = max + denom.ln();
                    total += lse - row[y];
                    for k in 0..c {
                        probs[r * c + k] = (row[k] - max).exp() / denom;
                    }
                }
                (
                    Tensor::scalar(total / n as f64),
                    Some(Tensor::from_parts(vec![n, c], probs)),
                )
            }
        };
        Ok(out)
    }

    fn node_name(&self, id: NodeId) -> String {
        match &self.nodes[id].op {
            Op::Param { name, .. } => name.clone(),
            _ => format!("node {id}"),
        }
    }

    /// Recomputes every non-leaf node from the recorded leaves and returns the
    /// loss. Identical inputs give a bit-identical result.
    pub fn replay(&self) -> Result<f64> {
        let mut fresh = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
            params: self.params.clone(),
            loss: self.loss,
        };
        for node in &self.nodes {
            let (value, saved) = match node.op {
                Op::Constant | Op::Param { .. } => (node.value.clone(), None),
                _ => fresh.eval(&node.op)?,
            };
            fresh.nodes.push(Node {
                op: node.op.clone(),
                value,
                saved,
            });
        }
        fresh
            .loss()
            .ok_or_else(|| Error::InvalidArgument("tape has no loss node".into()))
    }

    /// Gradient of the loss with respect to the selected parameters.
    pub fn backward(&self, wrt: &ParamSelector) -> Result<GradientVector> {
        self.backward_seeded(1.0, wrt)
    }

    /// Gradient of `seed * loss`.
    pub fn backward_seeded(&self, seed: f64, wrt: &ParamSelector) -> Result<GradientVector> {
        let loss = self
            .loss
            .ok_or_else(|| Error::InvalidArgument("tape has no loss node".into()))?;
        let selected = self.select(wrt)?;

        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss] = Some(Tensor::scalar(seed));
        for id in (0..=loss).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj);
            // Leaves keep their adjoint for collection below.
            if matches!(self.nodes[id].op, Op::Param { .. }) {
                adj[id] = Some(g);
            }
        }

        let mut out = NamedTensors::new();
        for (name, id) in selected {
            let g = adj[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape()));
            out.insert(name, g);
        }
        Ok(out)
    }

    fn select(&self, wrt: &ParamSelector) -> Result<Vec<(String, NodeId)>> {
        match wrt {
            ParamSelector::All => Ok(self
                .params
                .iter()
                .map(|((_, name), &id)| (name.clone(), id))
                .collect()),
            ParamSelector::Group(g) => Ok(self
                .params
                .iter()
                .filter(|((group, _), _)| group == g)
                .map(|((_, name), &id)| (name.clone(), id))
                .collect()),
            ParamSelector::Names(names) => names
                .iter()
                .map(|n| {
                    self.params
                        .iter()
                        .find(|((_, name), _)| name == n)
                        .map(|(_, &id)| (n.clone(), id))
                        .ok_or_else(|| Error::UnknownParameter(n.clone()))
                })
                .collect(),
        }
    }

    fn propagate(&self, id: NodeId, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let v = |i: NodeId| &self.nodes[i].value;
        match &node.op {
            Op::Constant | Op::Param { .. } | Op::Zero(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (v(*x), v(*w));
                let (n, inp, out) = (xv.rows(), xv.cols(), wv.cols());
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                let mut dx = vec![0.0; n * inp];
                for (dxr, gr) in dx.chunks_exact_mut(inp).zip(gd.chunks_exact(out)) {
                    for (d, wk) in dxr.iter_mut().zip(wd.chunks_exact(out)) {
                        *d = gr.iter().zip(wk).fold(0.0, |acc, (g, w)| acc + g * w);
                    }
                }
                let mut dw = vec![0.0; inp * out];
                for (xr, gr) in xd.chunks_exact(inp).zip(gd.chunks_exact(out)) {
                    for (&xk, dwk) in xr.iter().zip(dw.chunks_exact_mut(out)) {
                        for (acc, &g) in dwk.iter_mut().zip(gr) {
                            *acc += xk * g;
                        }
                    }
                }
                accumulate(adj, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                accumulate(adj, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                if let Some(b) = b {
                    let mut db = vec![0.0; out];
                    for r in 0..n {
                        for c in 0..out {
                            db[c] += gd[r * out + c];
                        }
                    }
                    accumulate(adj, *b, Tensor::from_parts(vec![out], db));
                }
            }
            Op::Relu(x) => {
                let xv = v(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, d)| if *a > 0.0 { *d } else { 0.0 })
                    .collect();
                accumulate(adj, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Tanh(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, d)| d * (1.0 - y * y))
                    .collect();
                accumulate(
                    adj,
                    *x,
                    Tensor::from_parts(node.value.shape().to_vec(), data),
                );
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Scale(x, c) => accumulate(adj, *x, g.map(|d| c * d)),
            Op::MeanPool(x) => {
                let (n, d) = (g.rows(), g.cols());
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let s = g.data()[r * d..(r + 1) * d]
                        .iter()
                        .fold(0.0, |acc, a| acc + a)
                        / d as f64;
                    dx[r * d..(r + 1) * d].iter_mut().for_each(|o| *o = s);
                }
                accumulate(adj, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Identity(x) => accumulate(adj, *x, g.clone()),
            Op::Softmax(a) => {
                let s = node.value.data();
                let dot = s.iter().zip(g.data()).fold(0.0, |acc, (p, d)| acc + p * d);
                let data = s.iter().zip(g.data()).map(|(p, d)| p * (d - dot)).collect();
                accumulate(adj, *a, Tensor::from_parts(vec![s.len()], data));
            }
            Op::Mix { weights, terms } => {
                let w = v(*weights);
                let mut dw = vec![0.0; terms.len()];
                for (m, &t) in terms.iter().enumerate() {
                    dw[m] = v(t)
                        .data()
                        .iter()
                        .zip(g.data())
                        .fold(0.0, |acc, (a, d)| acc + a * d);
                    accumulate(adj, t, g.map(|d| w.data()[m] * d));
                }
                accumulate(adj, *weights, Tensor::from_parts(w.shape().to_vec(), dw));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let probs = node.saved.as_ref().expect("probabilities saved in forward");
                let (n, c) = (probs.rows(), probs.cols());
                let scale = g.data()[0] / n as f64;
                let mut dz = probs.data().to_vec();
                for (r, &y) in labels.iter().enumerate() {
                    dz[r * c + y] -= 1.0;
                }
                dz.iter_mut().for_each(|d| *d *= scale);
                accumulate(adj, *logits, Tensor::from_parts(vec![n, c], dz));
            }
        }
    }
}

fn op_input_w(op: &Op) -> NodeId {
    match op {
        Op::Affine { w, .. } => *w,
        _ => unreachable!(),
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id] {
        Some(acc) => acc.axpy(1.0, &g),
        slot => *slot = Some(g),
    }
}

/// Numerically stable softmax of a score vector.
pub fn softmax(scores: &[f64]) -> Tensor {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|a| (a - max).exp()).collect();
    let denom = exps.iter().fold(0.0, |acc, e| acc + e);
    Tensor::from_parts(
        vec![scores.len()],
        exps.into_iter().map(|e| e / denom).collect(),
    )
}

/// A network that can be appended to a tape.
pub trait Model {
    /// Appends the network applied to `inputs` and returns the logits node.
    fn build(&self, tape: &mut Tape, inputs: NodeId) -> Result<NodeId>;
}

/// Mean per-example cross-entropy of `model` on `batch`, with its tape.
pub fn forward<M: Model + ?Sized>(model: &M, batch: &Batch) -> Result<(f64, Tape)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let x = tape.constant(batch.inputs.clone());
    let logits = model.build(&mut tape, x)?;
    tape.softmax_cross_entropy(logits, &batch.labels)?;
    let loss = tape.loss().expect("loss node just added");
    Ok((loss, tape))
}

/// Logits of `model` on `inputs` without a loss node.
pub fn predict<M: Model + ?Sized>(model: &M, inputs: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(inputs.clone());
    let logits = model.build(&mut tape, x)?;
    Ok(tape.value(logits).clone())
}

/// Mean cross-entropy and misclassification rate on a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub error: f64,
}

pub fn evaluate<M: Model + ?Sized>(model: &M, batch: &Batch) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let x = tape.constant(batch.inputs.clone());
    let logits = model.build(&mut tape, x)?;
    tape.softmax_cross_entropy(logits, &batch.labels)?;
    let z = tape.value(logits);
    let wrong = batch
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let c = z.cols();
            let row = &z.data()[i * c..(i + 1) * c];
            // First maximum wins ties.
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best != y
        })
        .count();
    Ok(Evaluation {
        loss: tape.loss().expect("loss node just added"),
        error: wrong as f64 / batch.len() as f64,
    })
}

/// `forward` followed by `backward`.
pub fn loss_and_gradient<M: Model + ?Sized>(
    model: &M,
    batch: &Batch,
    wrt: &ParamSelector,
) -> Result<(f64, GradientVector)> {
    let (loss, tape) = forward(model, batch)?;
    Ok((loss, tape.backward(wrt)?))
}

/// One gradient per example, each computed by replaying the graph on that
/// example alone (batch-size divisor 1).
pub fn per_sample_gradients<M: Model + ?Sized>(
    model: &M,
    batch: &Batch,
    wrt: &ParamSelector,
) -> Result<Vec<GradientVector>> {
    Ok(per_sample_losses_and_gradients(model, batch, wrt)?
        .into_iter()
        .map(|(_, g)| g)
        .collect())
}

pub fn per_sample_losses_and_gradients<M: Model + ?Sized>(
    model: &M,
    batch: &Batch,
    wrt: &ParamSelector,
) -> Result<Vec<(f64, GradientVector)>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    (0..batch.len())
        .map(|i| loss_and_gradient(model, &batch.example(i), wrt))
        .collect()
}

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_difference_gradient<F>(f: F, x: &NamedTensors, h: f64) -> Result<GradientVector>
where
    F: Fn(&NamedTensors) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step h = {h} must be positive"
        )));
    }
    let mut probe = x.clone();
    let mut out = x.zeros_like();
    let names: Vec<String> = x.keys().cloned().collect();
    for name in &names {
        let n = x.require(name)?.len();
        for i in 0..n {
            let orig = x.require(name)?.data()[i];
            probe.get_mut(name).expect("cloned key").data_mut()[i] = orig + h;
            let fp = f(&probe)?;
            probe.get_mut(name).expect("cloned key").data_mut()[i] = orig - h;
            let fm = f(&probe)?;
            probe.get_mut(name).expect("cloned key").data_mut()[i] = orig;
            out.get_mut(name).expect("cloned key").data_mut()[i] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Largest coordinatewise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &GradientVector, b: &GradientVector, floor: f64) -> Result<f64> {
    a.check_compatible(b)?;
    let mut worst = 0.0_f64;
    for (name, ta) in a.iter() {
        let tb = b.require(name)?;
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    Ok(worst)
}
