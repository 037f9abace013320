//! Differentiable search space: a DAG cell whose edges are softmax-weighted
//! mixtures of candidate operations, plus discretization back to a plain
//! network.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax, Model, NodeId, ParamGroup, Tape};
use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, Tensor};

/// Architecture variables: one score vector of length `M` per edge.
pub type ArchitectureVariables = NamedTensors;
/// Candidate-operation and classifier-head weights.
pub type WeightParameters = NamedTensors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Zero,
    Identity,
    DenseRelu,
    DenseTanh,
    Dense,
    MeanPool,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::Zero,
        OpKind::Identity,
        OpKind::DenseRelu,
        OpKind::DenseTanh,
        OpKind::Dense,
        OpKind::MeanPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Identity => "identity",
            OpKind::DenseRelu => "dense_relu",
            OpKind::DenseTanh => "dense_tanh",
            OpKind::Dense => "dense",
            OpKind::MeanPool => "mean_pool",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown operation `{name}`")))
    }

    /// Whether the op owns a `[d, d]` weight and `[d]` bias.
    pub fn is_parametric(self) -> bool {
        matches!(self, OpKind::DenseRelu | OpKind::DenseTanh | OpKind::Dense)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered candidate operations. The index of an op is stable for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateOpSet {
    ops: Vec<OpKind>,
}

impl CandidateOpSet {
    pub fn new(ops: Vec<OpKind>) -> Result<Self> {
        let count = |k: OpKind| ops.iter().filter(|&&o| o == k).count();
        if ops.len() < 2 || count(OpKind::Zero) != 1 || count(OpKind::Identity) != 1 {
            return Err(Error::InvalidArgument(
                "candidate set needs M >= 2 with exactly one zero and one identity".into(),
            ));
        }
        for k in OpKind::ALL {
            if count(k) > 1 {
                return Err(Error::InvalidArgument(format!("duplicate candidate `{k}`")));
            }
        }
        Ok(Self { ops })
    }

    /// zero, identity, dense+relu, dense+tanh, dense, mean-pool.
    pub fn standard() -> Self {
        Self {
            ops: OpKind::ALL.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn get(&self, m: usize) -> OpKind {
        self.ops[m]
    }

    pub fn iter(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.ops.iter().copied()
    }

    pub fn index_of(&self, kind: OpKind) -> Option<usize> {
        self.ops.iter().position(|&k| k == kind)
    }

    pub fn zero_index(&self) -> usize {
        self.index_of(OpKind::Zero)
            .expect("validated at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl Edge {
    pub fn id(&self) -> String {
        format!("e{}-{}", self.from, self.to)
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

/// DAG cell. Nodes `0..inputs` hold the cell input; the last node is the
/// output. Every edge goes from a lower to a higher node index.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGraph {
    nodes: usize,
    inputs: usize,
    edges: Vec<Edge>,
}

impl CellGraph {
    pub fn new(nodes: usize, inputs: usize, mut edges: Vec<Edge>) -> Result<Self> {
        if !(1..=2).contains(&inputs) || nodes <= inputs {
            return Err(Error::InvalidArgument(format!(
                "cell needs 1 or 2 input nodes and at least one more node (nodes={nodes}, inputs={inputs})"
            )));
        }
        edges.sort_by_key(|e| (e.to, e.from));
        edges.dedup();
        for e in &edges {
            if e.from >= e.to || e.to >= nodes || e.to < inputs {
                return Err(Error::InvalidArgument(format!("invalid edge {e}")));
            }
        }
        for i in inputs..nodes {
            if !edges.iter().any(|e| e.to == i) {
                return Err(Error::InvalidArgument(format!("node {i} has no ancestors")));
            }
        }
        Ok(Self {
            nodes,
            inputs,
            edges,
        })
    }

    /// Every non-input node is fed by every earlier node.
    pub fn dense(intermediate: usize) -> Result<Self> {
        let nodes = intermediate + 1;
        let edges = (1..nodes)
            .flat_map(|i| (0..i).map(move |j| Edge { from: j, to: i }))
            .collect();
        Self::new(nodes, 1, edges)
    }

    /// `0 -> 1 -> ... -> len`.
    pub fn chain(len: usize) -> Result<Self> {
        let edges = (0..len).map(|i| Edge { from: i, to: i + 1 }).collect();
        Self::new(len + 1, 1, edges)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn output(&self) -> usize {
        self.nodes - 1
    }

    /// Edges ordered by (target, source).
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn ancestors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.to == i).map(|e| e.from)
    }
}

/// Cell, candidate set, feature dimension and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub cell: CellGraph,
    pub ops: CandidateOpSet,
    pub dim: usize,
    pub classes: usize,
}

pub const HEAD_W: &str = "head/w";
pub const HEAD_B: &str = "head/b";

pub fn op_weight_name(edge: &Edge, op: OpKind) -> String {
    format!("{}/{}/w", edge.id(), op)
}

pub fn op_bias_name(edge: &Edge, op: OpKind) -> String {
    format!("{}/{}/b", edge.id(), op)
}

impl SearchSpace {
    pub fn new(cell: CellGraph, ops: CandidateOpSet, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need dim >= 1 and classes >= 2 (dim={dim}, classes={classes})"
            )));
        }
        Ok(Self {
            cell,
            ops,
            dim,
            classes,
        })
    }

    /// Name, shape and fan-in of every weight tensor.
    pub fn weight_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let d = self.dim;
        let mut specs = Vec::new();
        for e in self.cell.edges() {
            for op in self.ops.iter().filter(|o| o.is_parametric()) {
                specs.push((op_weight_name(e, op), vec![d, d], d));
                specs.push((op_bias_name(e, op), vec![d], d));
            }
        }
        specs.push((HEAD_W.into(), vec![d, self.classes], d));
        specs.push((HEAD_B.into(), vec![self.classes], d));
        specs
    }

    /// All-zero scores: every edge starts as the uniform mixture.
    pub fn init_arch(&self) -> ArchitectureVariables {
        self.cell
            .edges()
            .iter()
            .map(|e| (e.id(), Tensor::zeros(&[self.ops.len()])))
            .collect()
    }

    /// Uniform(-s, s) with `s = 1/sqrt(fan_in)`, drawn in key order.
    pub fn init_weights(&self, seed: u64) -> WeightParameters {
        init_uniform(self.weight_specs(), seed)
    }

    pub fn check_arch(&self, arch: &ArchitectureVariables) -> Result<()> {
        self.init_arch().check_compatible(arch)?;
        if !arch.all_finite() {
            return Err(Error::NonFinite("architecture variables".into()));
        }
        Ok(())
    }

    pub fn check_weights(&self, w: &WeightParameters) -> Result<()> {
        let expected: NamedTensors = self
            .weight_specs()
            .into_iter()
            .map(|(n, s, _)| (n, Tensor::zeros(&s)))
            .collect();
        expected.check_compatible(w)?;
        if !w.all_finite() {
            return Err(Error::NonFinite("weights".into()));
        }
        Ok(())
    }

    /// Per-edge softmax of the architecture scores.
    pub fn mixing_weights(&self, arch: &ArchitectureVariables) -> Result<Vec<(Edge, Vec<f64>)>> {
        self.cell
            .edges()
            .iter()
            .map(|e| Ok((*e, softmax(arch.require(&e.id())?.data()).into_data())))
            .collect()
    }
}

fn init_uniform(specs: Vec<(String, Vec<usize>, usize)>, seed: u64) -> NamedTensors {
    let mut specs = specs;
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let s = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
            (name, Tensor::from_parts(shape, data))
        })
        .collect()
}

/// Applies candidate `op` of `edge` to node `x`.
fn apply_op(
    tape: &mut Tape,
    x: NodeId,
    edge: &Edge,
    op: OpKind,
    weights: &NamedTensors,
    dim: usize,
) -> Result<NodeId> {
    let dense = |tape: &mut Tape| -> Result<NodeId> {
        let w = tape.param_from(
            ParamGroup::Weights,
            weights,
            &op_weight_name(edge, op),
            &[dim, dim],
        )?;
        let b = tape.param_from(
            ParamGroup::Weights,
            weights,
            &op_bias_name(edge, op),
            &[dim],
        )?;
        tape.affine(x, w, Some(b))
    };
    match op {
        OpKind::Zero => tape.zero(x),
        OpKind::Identity => tape.identity(x),
        OpKind::DenseRelu => {
            let h = dense(tape)?;
            tape.relu(h)
        }
        OpKind::DenseTanh => {
            let h = dense(tape)?;
            tape.tanh(h)
        }
        OpKind::Dense => dense(tape),
        OpKind::MeanPool => tape.mean_pool(x),
    }
}

/// `sum_m softmax(a)_m * o_m(x)` for one edge, recorded on `tape`.
pub fn mixed_edge_forward(
    tape: &mut Tape,
    x: NodeId,
    edge: &Edge,
    ops: &CandidateOpSet,
    scores: NodeId,
    weights: &NamedTensors,
    dim: usize,
) -> Result<NodeId> {
    if tape.value(scores).shape() != [ops.len()] {
        return Err(Error::ShapeMismatch {
            name: edge.id(),
            expected: vec![ops.len()],
            got: tape.value(scores).shape().to_vec(),
        });
    }
    let outputs = ops
        .iter()
        .map(|op| apply_op(tape, x, edge, op, weights, dim))
        .collect::<Result<Vec<_>>>()?;
    let mix = tape.softmax(scores)?;
    tape.mix(mix, outputs)
}

fn classifier_head(
    tape: &mut Tape,
    x: NodeId,
    weights: &NamedTensors,
    dim: usize,
    classes: usize,
) -> Result<NodeId> {
    let w = tape.param_from(ParamGroup::Weights, weights, HEAD_W, &[dim, classes])?;
    let b = tape.param_from(ParamGroup::Weights, weights, HEAD_B, &[classes])?;
    tape.affine(x, w, Some(b))
}

/// Evaluates the cell in topological order, combining incoming edges by sum.
fn cell_forward(
    tape: &mut Tape,
    input: NodeId,
    cell: &CellGraph,
    mut edge_fn: impl FnMut(&mut Tape, &Edge, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let mut values: Vec<Option<NodeId>> = vec![None; cell.nodes()];
    for v in values.iter_mut().take(cell.inputs()) {
        *v = Some(input);
    }
    for e in cell.edges() {
        let src = values[e.from].expect("edges sorted by target");
        let out = edge_fn(tape, e, src)?;
        values[e.to] = Some(match values[e.to] {
            Some(acc) => tape.add(acc, out)?,
            None => out,
        });
    }
    Ok(values[cell.output()].expect("output node has ancestors"))
}

/// The over-parameterized network: every edge is a mixed operation.
pub struct Supernet<'a> {
    pub space: &'a SearchSpace,
    pub arch: &'a ArchitectureVariables,
    pub weights: &'a WeightParameters,
}

impl Model for Supernet<'_> {
    fn build(&self, tape: &mut Tape, inputs: NodeId) -> Result<NodeId> {
        let sp = self.space;
        if tape.value(inputs).cols() != sp.dim {
            return Err(Error::ShapeMismatch {
                name: "inputs".into(),
                expected: vec![tape.value(inputs).rows(), sp.dim],
                got: tape.value(inputs).shape().to_vec(),
            });
        }
        let out = cell_forward(tape, inputs, &sp.cell, |tape, e, x| {
            let a = tape.param_from(ParamGroup::Arch, self.arch, &e.id(), &[sp.ops.len()])?;
            mixed_edge_forward(tape, x, e, &sp.ops, a, self.weights, sp.dim)
        })?;
        classifier_head(tape, out, self.weights, sp.dim, sp.classes)
    }
}

/// Retained operation indices per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteArchitecture {
    pub topk: usize,
    pub ops: CandidateOpSet,
    pub edges: Vec<(Edge, Vec<usize>)>,
}

/// Keeps the `topk` highest-scoring non-zero operations of every edge. Ties
/// go to the lower operation index.
pub fn discretize(
    space: &SearchSpace,
    arch: &ArchitectureVariables,
    topk: usize,
) -> Result<DiscreteArchitecture> {
    let m = space.ops.len();
    if topk == 0 || topk > m - 1 {
        return Err(Error::InvalidArgument(format!(
            "topk must lie in 1..={} (got {topk})",
            m - 1
        )));
    }
    space.check_arch(arch)?;
    let zero = space.ops.zero_index();
    let edges = space
        .cell
        .edges()
        .iter()
        .map(|e| {
            let scores = arch.require(&e.id())?.data();
            let mut idx: Vec<usize> = (0..m).filter(|&i| i != zero).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            idx.truncate(topk);
            Ok((*e, idx))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscreteArchitecture {
        topk,
        ops: space.ops.clone(),
        edges,
    })
}

impl DiscreteArchitecture {
    /// One line per edge: `edge j->i: [op, op]`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (e, kept) in &self.edges {
            let names: Vec<&str> = kept.iter().map(|&m| self.ops.get(m).name()).collect();
            s.push_str(&format!("edge {e}: [{}]\n", names.join(", ")));
        }
        s
    }

    pub fn parse_text(text: &str, ops: &CandidateOpSet) -> Result<Self> {
        let bad = |line: &str| Error::Decode(format!("malformed architecture line `{line}`"));
        let mut edges = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let rest = line.strip_prefix("edge ").ok_or_else(|| bad(line))?;
            let (pair, list) = rest.split_once(':').ok_or_else(|| bad(line))?;
            let (from, to) = pair.trim().split_once("->").ok_or_else(|| bad(line))?;
            let edge = Edge {
                from: from.trim().parse().map_err(|_| bad(line))?,
                to: to.trim().parse().map_err(|_| bad(line))?,
            };
            let list = list
                .trim()
                .strip_prefix('[')
                .and_then(|l| l.strip_suffix(']'))
                .ok_or_else(|| bad(line))?;
            let kept = list
                .split(',')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .map(|n| {
                    let kind = OpKind::from_name(n)?;
                    ops.index_of(kind)
                        .ok_or_else(|| Error::Decode(format!("`{n}` is not a candidate")))
                })
                .collect::<Result<Vec<_>>>()?;
            edges.push((edge, kept));
        }
        let topk = edges.first().map(|(_, k)| k.len()).unwrap_or(0);
        let zero = ops.zero_index();
        if topk == 0
            || edges
                .iter()
                .any(|(_, k)| k.len() != topk || k.contains(&zero))
        {
            return Err(Error::Decode(
                "every edge must retain the same nonzero number of non-zero ops".into(),
            ));
        }
        Ok(Self {
            topk,
            ops: ops.clone(),
            edges,
        })
    }

    pub fn cell(&self) -> Result<CellGraph> {
        let nodes = self.edges.iter().map(|(e, _)| e.to).max().unwrap_or(0) + 1;
        CellGraph::new(nodes, 1, self.edges.iter().map(|(e, _)| *e).collect())
    }
}

/// A plain network built from a discrete architecture. An edge with several
/// retained ops averages them, which is what the supernet computes when those
/// scores saturate equally.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteNetwork {
    pub arch: DiscreteArchitecture,
    pub cell: CellGraph,
    pub dim: usize,
    pub classes: usize,
    pub weights: WeightParameters,
}

impl DiscreteNetwork {
    pub fn weight_specs(
        arch: &DiscreteArchitecture,
        dim: usize,
        classes: usize,
    ) -> Vec<(String, Vec<usize>, usize)> {
        let mut specs = Vec::new();
        for (e, kept) in &arch.edges {
            for &m in kept {
                let op = arch.ops.get(m);
                if op.is_parametric() {
                    specs.push((op_weight_name(e, op), vec![dim, dim], dim));
                    specs.push((op_bias_name(e, op), vec![dim], dim));
                }
            }
        }
        specs.push((HEAD_W.into(), vec![dim, classes], dim));
        specs.push((HEAD_B.into(), vec![classes], dim));
        specs
    }

    /// Wraps existing weights; keys not used by the retained ops are dropped.
    pub fn with_weights(
        arch: &DiscreteArchitecture,
        dim: usize,
        classes: usize,
        weights: &WeightParameters,
    ) -> Result<Self> {
        let picked = Self::weight_specs(arch, dim, classes)
            .into_iter()
            .map(|(name, shape, _)| {
                let t = weights.require(&name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        name,
                        expected: shape,
                        got: t.shape().to_vec(),
                    });
                }
                Ok((name, t.clone()))
            })
            .collect::<Result<NamedTensors>>()?;
        Ok(Self {
            arch: arch.clone(),
            cell: arch.cell()?,
            dim,
            classes,
            weights: picked,
        })
    }
}

/// Builds the discrete network with fresh weights drawn from `seed`.
pub fn materialize(
    arch: &DiscreteArchitecture,
    dim: usize,
    classes: usize,
    seed: u64,
) -> Result<DiscreteNetwork> {
    let weights = init_uniform(DiscreteNetwork::weight_specs(arch, dim, classes), seed);
    DiscreteNetwork::with_weights(arch, dim, classes, &weights)
}

impl Model for DiscreteNetwork {
    fn build(&self, tape: &mut Tape, inputs: NodeId) -> Result<NodeId> {
        let kept_of = |e: &Edge| {
            self.arch
                .edges
                .iter()
                .find(|(x, _)| x == e)
                .map(|(_, k)| k.as_slice())
                .expect("cell derived from the same edge list")
        };
        let out = cell_forward(tape, inputs, &self.cell, |tape, e, x| {
            let kept = kept_of(e);
            let mut acc: Option<NodeId> = None;
            for &m in kept {
                let o = apply_op(tape, x, e, self.arch.ops.get(m), &self.weights, self.dim)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, o)?,
                    None => o,
                });
            }
            let acc = acc.expect("topk >= 1");
            if kept.len() == 1 {
                Ok(acc)
            } else {
                tape.scale(acc, 1.0 / kept.len() as f64)
            }
        })?;
        classifier_head(tape, out, &self.weights, self.dim, self.classes)
    }
}
