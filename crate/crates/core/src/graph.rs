//! Validated DAG of layer nodes with channel bookkeeping, reference
//! evaluation and parameter / MAC accounting.
//!
//! Edges connect an output port of a producer to an input slot of a
//! consumer. `Split` is the only node with more than one output port; `Add`
//! and `Concat` take any positive number of inputs, every other non-input
//! node takes exactly one.
//!
//! Accounting conventions: a convolution has `out * (in / groups) * kh * kw`
//! weights plus `out` biases and costs `H_out * W_out * out * (in / groups) *
//! kh * kw` MACs; batch norm has `4 * c` parameters and costs nothing (it
//! folds into the preceding convolution at inference); FLOPs are reported as
//! `2 * MACs`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    activation, batch_norm, channel_shuffle, conv2d, eltwise, split_channels, ActivationKind, BatchNormSpec, ConvSpec,
    Element, EltwiseOp, Shape, Tensor,
};

pub const COMPUTATIONAL_BLOCK: &str = "computational-block";
pub const TRANSITION: &str = "transition";
pub const AUX_HEAD_TAP: &str = "aux-head-tap";
pub const STEM: &str = "stem";
pub const MERGE: &str = "merge-cardinality";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// One output port of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Port {
    pub node: NodeId,
    pub port: usize,
}

impl From<NodeId> for Port {
    fn from(node: NodeId) -> Self {
        Port { node, port: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: NodeId,
    pub port: usize,
    pub dst: NodeId,
    pub slot: usize,
}

/// A convolution immediately followed by batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T: Element = f32> {
    pub conv: ConvSpec<T>,
    pub bn: BatchNormSpec<T>,
}

impl<T: Element> ConvBn<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batch_norm(&conv2d(x, &self.conv)?, &self.bn)
    }

    pub fn param_count(&self) -> u64 {
        self.conv.param_count() + self.bn.param_count()
    }
}

/// Training-time re-parameterizable block: a 3×3 conv-BN branch, an optional
/// 1×1 conv-BN branch and an optional identity-BN branch, summed.
#[derive(Debug, Clone, PartialEq)]
pub struct RepBlockSpec<T: Element = f32> {
    pub dense: ConvBn<T>,
    pub pointwise: Option<ConvBn<T>>,
    pub identity_bn: Option<BatchNormSpec<T>>,
}

impl<T: Element> RepBlockSpec<T> {
    pub fn in_channels(&self) -> usize {
        self.dense.conv.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.dense.conv.out_channels
    }

    pub fn stride(&self) -> usize {
        self.dense.conv.stride.0
    }

    pub fn groups(&self) -> usize {
        self.dense.conv.groups
    }

    pub fn has_identity(&self) -> bool {
        self.identity_bn.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dense.conv;
        d.validate()?;
        self.dense.bn.validate()?;
        if d.kernel != (3, 3) || d.padding != (1, 1) {
            return Err(Error::InvalidParams(format!(
                "rep block 3x3 branch must be kernel (3,3) padding (1,1), got kernel {:?} padding {:?}",
                d.kernel, d.padding
            )));
        }
        if d.stride.0 != d.stride.1 {
            return Err(Error::InvalidParams("rep block stride must be square".into()));
        }
        if self.dense.bn.channels() != d.out_channels {
            return Err(Error::shape("rep block 3x3 bn", "c", d.out_channels, self.dense.bn.channels()));
        }
        if let Some(pw) = &self.pointwise {
            let p = &pw.conv;
            p.validate()?;
            pw.bn.validate()?;
            if p.kernel != (1, 1) || p.padding != (0, 0) {
                return Err(Error::InvalidParams("rep block 1x1 branch must be kernel (1,1) padding (0,0)".into()));
            }
            if p.in_channels != d.in_channels {
                return Err(Error::shape("rep block 1x1 branch", "in_channels", d.in_channels, p.in_channels));
            }
            if p.out_channels != d.out_channels {
                return Err(Error::shape("rep block 1x1 branch", "out_channels", d.out_channels, p.out_channels));
            }
            if p.groups != d.groups || p.stride != d.stride {
                return Err(Error::InvalidParams("rep block branches must share groups and stride".into()));
            }
            if pw.bn.channels() != d.out_channels {
                return Err(Error::shape("rep block 1x1 bn", "c", d.out_channels, pw.bn.channels()));
            }
        }
        if let Some(bn) = &self.identity_bn {
            bn.validate()?;
            if d.in_channels != d.out_channels || d.stride != (1, 1) {
                return Err(Error::InvalidParams(format!(
                    "identity branch requires in == out and stride 1 (in {}, out {}, stride {})",
                    d.in_channels, d.out_channels, d.stride.0
                )));
            }
            if bn.channels() != d.out_channels {
                return Err(Error::shape("rep block identity bn", "c", d.out_channels, bn.channels()));
            }
        }
        Ok(())
    }

    /// Branch outputs in the fixed order 3×3, 1×1, identity.
    pub fn branch_outputs(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.validate()?;
        let mut out = vec![self.dense.forward(x)?];
        if let Some(pw) = &self.pointwise {
            out.push(pw.forward(x)?);
        }
        if let Some(bn) = &self.identity_bn {
            out.push(batch_norm(x, bn)?);
        }
        Ok(out)
    }

    /// Training-form evaluation: the sum of all branch outputs.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let branches = self.branch_outputs(x)?;
        eltwise(EltwiseOp::Add, &branches.iter().collect::<Vec<_>>())
    }

    pub fn param_count(&self) -> u64 {
        self.dense.param_count()
            + self.pointwise.as_ref().map_or(0, ConvBn::param_count)
            + self.identity_bn.as_ref().map_or(0, BatchNormSpec::param_count)
    }

    pub fn cast<U: Element>(&self) -> RepBlockSpec<U> {
        RepBlockSpec {
            dense: ConvBn { conv: self.dense.conv.cast(), bn: self.dense.bn.cast() },
            pointwise: self.pointwise.as_ref().map(|p| ConvBn { conv: p.conv.cast(), bn: p.bn.cast() }),
            identity_bn: self.identity_bn.as_ref().map(BatchNormSpec::cast),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Input { name: String, channels: usize },
    Output { name: String, channels: usize },
    Conv(ConvSpec),
    BatchNorm(BatchNormSpec),
    Activation(ActivationKind),
    Add,
    Concat,
    Shuffle { groups: usize },
    Split { ways: usize },
    RepBlock(RepBlockSpec),
}

enum Arity {
    None,
    One,
    Many,
}

impl NodeKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Output { .. } => "output",
            NodeKind::Conv(_) => "conv",
            NodeKind::BatchNorm(_) => "batch_norm",
            NodeKind::Activation(_) => "activation",
            NodeKind::Add => "add",
            NodeKind::Concat => "concat",
            NodeKind::Shuffle { .. } => "shuffle",
            NodeKind::Split { .. } => "split",
            NodeKind::RepBlock(_) => "rep_block",
        }
    }

    pub fn output_ports(&self) -> usize {
        match self {
            NodeKind::Output { .. } => 0,
            NodeKind::Split { ways } => *ways,
            _ => 1,
        }
    }

    fn arity(&self) -> Arity {
        match self {
            NodeKind::Input { .. } => Arity::None,
            NodeKind::Add | NodeKind::Concat => Arity::Many,
            _ => Arity::One,
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            NodeKind::Conv(c) => c.param_count(),
            NodeKind::BatchNorm(bn) => bn.param_count(),
            NodeKind::RepBlock(r) => r.param_count(),
            _ => 0,
        }
    }

    fn check_params(&self) -> Result<()> {
        match self {
            NodeKind::Input { channels, .. } | NodeKind::Output { channels, .. } if *channels == 0 => {
                Err(Error::InvalidParams("declared channel count must be >= 1".into()))
            }
            NodeKind::Conv(c) => c.validate(),
            NodeKind::BatchNorm(bn) => bn.validate(),
            NodeKind::RepBlock(r) => r.validate(),
            NodeKind::Shuffle { groups: 0 } => Err(Error::InvalidParams("shuffle groups must be >= 1".into())),
            NodeKind::Split { ways: 0 } => Err(Error::InvalidParams("split ways must be >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Output channels per port given input channels per slot, or a
    /// description of the inconsistency.
    fn infer_channels(&self, inputs: &[usize]) -> std::result::Result<Vec<usize>, (usize, usize, String)> {
        let first = inputs.first().copied().unwrap_or(0);
        let expect = |want: usize, what: &str| {
            if first == want {
                Ok(())
            } else {
                Err((want, first, what.to_string()))
            }
        };
        match self {
            NodeKind::Input { channels, .. } => Ok(vec![*channels]),
            NodeKind::Output { channels, .. } => expect(*channels, "declared output channels").map(|_| vec![]),
            NodeKind::Conv(c) => expect(c.in_channels, "conv in_channels").map(|_| vec![c.out_channels]),
            NodeKind::BatchNorm(bn) => expect(bn.channels(), "batch norm channels").map(|_| vec![first]),
            NodeKind::RepBlock(r) => expect(r.in_channels(), "rep block in_channels").map(|_| vec![r.out_channels()]),
            NodeKind::Activation(_) => Ok(vec![first]),
            NodeKind::Add => {
                for &c in &inputs[1..] {
                    if c != first {
                        return Err((first, c, "add operands must have equal channels".into()));
                    }
                }
                Ok(vec![first])
            }
            NodeKind::Concat => Ok(vec![inputs.iter().sum()]),
            NodeKind::Shuffle { groups } => {
                if first % groups != 0 {
                    Err((
                        groups * (first / groups + 1),
                        first,
                        format!("channels not divisible by shuffle groups {groups}"),
                    ))
                } else {
                    Ok(vec![first])
                }
            }
            NodeKind::Split { ways } => {
                if first % ways != 0 {
                    Err((ways * (first / ways + 1), first, format!("channels not divisible by split ways {ways}")))
                } else {
                    Ok(vec![first / ways; *ways])
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Free-form role tag such as [`COMPUTATIONAL_BLOCK`] or [`TRANSITION`].
    pub annotation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateId(NodeId),
    DuplicateName(String),
    UnknownNode { edge: usize, node: NodeId },
    BadPort { edge: usize, node: NodeId, port: usize, ports: usize },
    BadSlot { node: NodeId, slot: usize },
    SlotFilledTwice { node: NodeId, slot: usize },
    DanglingSlot { node: NodeId, slot: usize },
    Cycle { nodes: Vec<NodeId> },
    ChannelMismatch { node: NodeId, expected: usize, found: usize, detail: String },
    InvalidParams { node: NodeId, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate node id {id}"),
            Violation::DuplicateName(name) => write!(f, "duplicate input/output name {name:?}"),
            Violation::UnknownNode { edge, node } => write!(f, "edge {edge} references unknown node {node}"),
            Violation::BadPort { edge, node, port, ports } => {
                write!(f, "edge {edge} reads port {port} of {node}, which has {ports} output ports")
            }
            Violation::BadSlot { node, slot } => write!(f, "{node} has no input slot {slot}"),
            Violation::SlotFilledTwice { node, slot } => write!(f, "{node} slot {slot} is filled more than once"),
            Violation::DanglingSlot { node, slot } => write!(f, "{node} slot {slot} is not connected"),
            Violation::Cycle { nodes } => {
                let ids: Vec<String> = nodes.iter().map(ToString::to_string).collect();
                write!(f, "cycle through {}", ids.join(", "))
            }
            Violation::ChannelMismatch { node, expected, found, detail } => {
                write!(f, "{node}: channel mismatch ({detail}): expected {expected}, found {found}")
            }
            Violation::InvalidParams { node, reason } => write!(f, "{node}: {reason}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub per_node: Vec<(NodeId, u64)>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacCount {
    pub per_node: Vec<(NodeId, u64)>,
    pub total_macs: u64,
}

impl MacCount {
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphIR {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl GraphIR {
    /// Wraps nodes and edges without checking them; see [`GraphIR::validate`].
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Self {
        GraphIR { nodes, edges }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn into_parts(self) -> (Vec<Node>, Vec<Edge>) {
        (self.nodes, self.edges)
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn next_id(&self) -> NodeId {
        NodeId(self.nodes.iter().map(|n| n.id.0 + 1).max().unwrap_or(0))
    }

    /// Producers feeding `id`, ordered by slot.
    pub fn inputs_of(&self, id: NodeId) -> Vec<Port> {
        let mut v: Vec<(usize, Port)> =
            self.edges.iter().filter(|e| e.dst == id).map(|e| (e.slot, Port { node: e.src, port: e.port })).collect();
        v.sort();
        v.into_iter().map(|(_, p)| p).collect()
    }

    /// Consumers of every output port of `id` as `(consumer, slot)`.
    pub fn consumers_of(&self, id: NodeId) -> Vec<(NodeId, usize)> {
        self.edges.iter().filter(|e| e.src == id).map(|e| (e.dst, e.slot)).collect()
    }

    pub fn input_decls(&self) -> Vec<(String, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Input { name, channels } => Some((name.clone(), *channels)),
                _ => None,
            })
            .collect()
    }

    pub fn output_decls(&self) -> Vec<(String, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Output { name, channels } => Some((name.clone(), *channels)),
                _ => None,
            })
            .collect()
    }

    /// Kahn's algorithm, ready nodes taken in node-list order. On a cycle the
    /// nodes that could not be ordered are returned as the error.
    pub fn topo_order(&self) -> std::result::Result<Vec<NodeId>, Vec<NodeId>> {
        let position: HashMap<NodeId, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            if let (Some(&s), Some(&d)) = (position.get(&e.src), position.get(&e.dst)) {
                indegree[d] += 1;
                succ[s].push(d);
            }
        }
        let mut ready: BTreeSet<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(self.nodes[i].id);
            for &d in &succ[i] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    ready.insert(d);
                }
            }
        }
        if order.len() == self.nodes.len() {
            Ok(order)
        } else {
            let done: BTreeSet<NodeId> = order.into_iter().collect();
            Err(self.nodes.iter().map(|n| n.id).filter(|id| !done.contains(id)).collect())
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                violations.push(Violation::DuplicateId(n.id));
            }
            if let Err(e) = n.kind.check_params() {
                violations.push(Violation::InvalidParams { node: n.id, reason: e.to_string() });
            }
        }
        let mut names = BTreeSet::new();
        for (name, _) in self.input_decls().into_iter().chain(self.output_decls()) {
            if !names.insert(name.clone()) {
                violations.push(Violation::DuplicateName(name));
            }
        }

        let by_id: HashMap<NodeId, &Node> = self.nodes.iter().map(|n| (n.id, n)).collect();
        let mut slots: HashMap<NodeId, BTreeMap<usize, usize>> = HashMap::new();
        for (i, e) in self.edges.iter().enumerate() {
            let (Some(src), Some(dst)) = (by_id.get(&e.src), by_id.get(&e.dst)) else {
                let node = if by_id.contains_key(&e.src) { e.dst } else { e.src };
                violations.push(Violation::UnknownNode { edge: i, node });
                continue;
            };
            let ports = src.kind.output_ports();
            if e.port >= ports {
                violations.push(Violation::BadPort { edge: i, node: e.src, port: e.port, ports });
            }
            match dst.kind.arity() {
                Arity::None => violations.push(Violation::BadSlot { node: e.dst, slot: e.slot }),
                Arity::One if e.slot > 0 => violations.push(Violation::BadSlot { node: e.dst, slot: e.slot }),
                _ => {}
            }
            *slots.entry(e.dst).or_default().entry(e.slot).or_default() += 1;
        }
        for n in &self.nodes {
            let filled = slots.get(&n.id).cloned().unwrap_or_default();
            for (&slot, &count) in &filled {
                if count > 1 {
                    violations.push(Violation::SlotFilledTwice { node: n.id, slot });
                }
            }
            let needed = match n.kind.arity() {
                Arity::None => 0,
                Arity::One => 1,
                Arity::Many => filled.keys().next_back().map_or(1, |&s| s + 1),
            };
            for slot in 0..needed {
                if !filled.contains_key(&slot) {
                    violations.push(Violation::DanglingSlot { node: n.id, slot });
                }
            }
        }

        match self.topo_order() {
            Err(nodes) => violations.push(Violation::Cycle { nodes }),
            Ok(order) if violations.is_empty() => {
                let mut channels: HashMap<Port, usize> = HashMap::new();
                for id in order {
                    let node = by_id[&id];
                    let inputs: Vec<usize> = self.inputs_of(id).iter().map(|p| channels[p]).collect();
                    match node.kind.infer_channels(&inputs) {
                        Ok(outs) => {
                            for (port, c) in outs.into_iter().enumerate() {
                                channels.insert(Port { node: id, port }, c);
                            }
                        }
                        Err((expected, found, detail)) => {
                            violations.push(Violation::ChannelMismatch { node: id, expected, found, detail });
                            // Keep going with a best guess so later nodes are still checked.
                            let guess = node.kind.output_ports();
                            for port in 0..guess {
                                channels.insert(Port { node: id, port }, found.max(1));
                            }
                        }
                    }
                }
            }
            Ok(_) => {}
        }
        ValidationReport { violations }
    }

    fn ensure_valid(&self) -> Result<Vec<NodeId>> {
        let report = self.validate();
        if !report.is_empty() {
            return Err(Error::Invalid(report.to_string().trim_end().to_string()));
        }
        self.topo_order().map_err(|_| Error::Invalid("cycle".into()))
    }

    /// Output channel count of every port.
    pub fn port_channels(&self) -> Result<HashMap<Port, usize>> {
        let order = self.ensure_valid()?;
        let mut channels = HashMap::new();
        for id in order {
            let inputs: Vec<usize> = self.inputs_of(id).iter().map(|p| channels[p]).collect();
            let node = self.node(id).expect("ordered node exists");
            let outs = node.kind.infer_channels(&inputs).map_err(|(_, _, d)| Error::Graph { node: id.0, reason: d })?;
            for (port, c) in outs.into_iter().enumerate() {
                channels.insert(Port { node: id, port }, c);
            }
        }
        Ok(channels)
    }

    /// Evaluates the graph in topological order. Rep blocks run in their
    /// multi-branch training form.
    pub fn eval(&self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        let order = self.ensure_valid()?;
        let mut values: HashMap<Port, Tensor> = HashMap::new();
        let mut outputs = BTreeMap::new();
        for id in order {
            let node = self.node(id).expect("ordered node exists");
            let args: Vec<&Tensor> = self.inputs_of(id).iter().map(|p| &values[p]).collect();
            let results = eval_node(node, &args, inputs, &mut outputs).map_err(|e| Error::at_node(id.0, e))?;
            for (port, t) in results.into_iter().enumerate() {
                values.insert(Port { node: id, port }, t);
            }
        }
        Ok(outputs)
    }

    pub fn count_params(&self) -> ParamCount {
        let per_node: Vec<(NodeId, u64)> = self.nodes.iter().map(|n| (n.id, n.kind.param_count())).collect();
        let total = per_node.iter().map(|(_, c)| c).sum();
        ParamCount { per_node, total }
    }

    /// Spatial size of every port when each graph input is `h × w`.
    pub fn port_shapes(&self, h: usize, w: usize) -> Result<HashMap<Port, (usize, usize, usize)>> {
        let order = self.ensure_valid()?;
        let channels = self.port_channels()?;
        let mut shapes: HashMap<Port, (usize, usize, usize)> = HashMap::new();
        for id in order {
            let node = self.node(id).expect("ordered node exists");
            let ins: Vec<(usize, usize, usize)> = self.inputs_of(id).iter().map(|p| shapes[p]).collect();
            let hw = match &node.kind {
                NodeKind::Input { .. } => (h, w),
                NodeKind::Conv(c) => c.output_hw(ins[0].1, ins[0].2).map_err(|e| Error::at_node(id.0, e))?,
                NodeKind::RepBlock(r) => {
                    r.dense.conv.output_hw(ins[0].1, ins[0].2).map_err(|e| Error::at_node(id.0, e))?
                }
                NodeKind::Add | NodeKind::Concat => {
                    let first = (ins[0].1, ins[0].2);
                    if let Some(bad) = ins.iter().find(|s| (s.1, s.2) != first) {
                        return Err(Error::Graph {
                            node: id.0,
                            reason: format!("spatial mismatch {:?} vs {:?}", first, (bad.1, bad.2)),
                        });
                    }
                    first
                }
                _ => (ins[0].1, ins[0].2),
            };
            for port in 0..node.kind.output_ports() {
                let p = Port { node: id, port };
                shapes.insert(p, (channels[&p], hw.0, hw.1));
            }
        }
        Ok(shapes)
    }

    pub fn count_macs(&self, h: usize, w: usize) -> Result<MacCount> {
        let shapes = self.port_shapes(h, w)?;
        let per_node: Vec<(NodeId, u64)> = self
            .nodes
            .iter()
            .map(|n| {
                let out = |port| shapes.get(&Port { node: n.id, port }).copied().unwrap_or((0, 0, 0));
                let macs = match &n.kind {
                    NodeKind::Conv(c) => conv_macs(c, out(0)),
                    NodeKind::RepBlock(r) => {
                        conv_macs(&r.dense.conv, out(0))
                            + r.pointwise.as_ref().map_or(0, |p| conv_macs(&p.conv, out(0)))
                    }
                    _ => 0,
                };
                (n.id, macs)
            })
            .collect();
        let total_macs = per_node.iter().map(|(_, m)| m).sum();
        Ok(MacCount { per_node, total_macs })
    }

    /// Node count with every rep block counted as its explicit sub-graph.
    pub fn primitive_node_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.kind {
                NodeKind::RepBlock(r) => 3 + if r.pointwise.is_some() { 2 } else { 0 } + usize::from(r.has_identity()),
                _ => 1,
            })
            .sum()
    }

    /// Rewrites every rep block into its explicit conv→BN branches joined by
    /// an `Add`, which keeps the rep block's node id.
    pub fn expand_rep_blocks(&self) -> GraphIR {
        let mut nodes = Vec::new();
        let mut edges: Vec<Edge> = Vec::new();
        let mut next = self.next_id().0;
        let mut fresh = || {
            next += 1;
            NodeId(next - 1)
        };
        for n in &self.nodes {
            let NodeKind::RepBlock(r) = &n.kind else {
                nodes.push(n.clone());
                continue;
            };
            let src = self.inputs_of(n.id)[0];
            let mut branches: Vec<NodeId> = Vec::new();
            let mut push_conv_bn = |cb: &ConvBn, nodes: &mut Vec<Node>, edges: &mut Vec<Edge>| {
                let c = fresh();
                let b = fresh();
                nodes.push(Node { id: c, kind: NodeKind::Conv(cb.conv.clone()), annotation: n.annotation.clone() });
                nodes.push(Node { id: b, kind: NodeKind::BatchNorm(cb.bn.clone()), annotation: n.annotation.clone() });
                edges.push(Edge { src: src.node, port: src.port, dst: c, slot: 0 });
                edges.push(Edge { src: c, port: 0, dst: b, slot: 0 });
                b
            };
            branches.push(push_conv_bn(&r.dense, &mut nodes, &mut edges));
            if let Some(pw) = &r.pointwise {
                branches.push(push_conv_bn(pw, &mut nodes, &mut edges));
            }
            if let Some(bn) = &r.identity_bn {
                let b = fresh();
                nodes.push(Node { id: b, kind: NodeKind::BatchNorm(bn.clone()), annotation: n.annotation.clone() });
                edges.push(Edge { src: src.node, port: src.port, dst: b, slot: 0 });
                branches.push(b);
            }
            nodes.push(Node { id: n.id, kind: NodeKind::Add, annotation: n.annotation.clone() });
            for (slot, b) in branches.into_iter().enumerate() {
                edges.push(Edge { src: b, port: 0, dst: n.id, slot });
            }
        }
        edges.extend(
            self.edges.iter().filter(|e| !matches!(self.node(e.dst).map(|n| &n.kind), Some(NodeKind::RepBlock(_)))),
        );
        GraphIR { nodes, edges }
    }

    /// Returns a copy with the kind of `id` replaced.
    pub fn with_kind(&self, id: NodeId, kind: NodeKind) -> Result<GraphIR> {
        let mut g = self.clone();
        let node = g
            .nodes
            .iter_mut()
            .find(|n| n.id == id)
            .ok_or_else(|| Error::Graph { node: id.0, reason: "no such node".into() })?;
        node.kind = kind;
        Ok(g)
    }

    /// Removes single-input, single-output node `id`, connecting its
    /// producer directly to all of its consumers.
    pub fn bypass(&self, id: NodeId) -> Result<GraphIR> {
        let inputs = self.inputs_of(id);
        let node = self.node(id).ok_or_else(|| Error::Graph { node: id.0, reason: "no such node".into() })?;
        if inputs.len() != 1 || node.kind.output_ports() != 1 {
            return Err(Error::Graph {
                node: id.0,
                reason: "only single-input single-output nodes can be bypassed".into(),
            });
        }
        let src = inputs[0];
        let nodes = self.nodes.iter().filter(|n| n.id != id).cloned().collect();
        let edges = self
            .edges
            .iter()
            .filter(|e| e.dst != id)
            .map(|e| if e.src == id { Edge { src: src.node, port: src.port, ..*e } } else { *e })
            .collect();
        Ok(GraphIR { nodes, edges })
    }

    /// Adds a node fed by `inputs` (slot order) and returns the new graph and id.
    pub fn with_node(&self, kind: NodeKind, annotation: &str, inputs: &[Port]) -> (GraphIR, NodeId) {
        let mut g = self.clone();
        let id = g.next_id();
        g.nodes.push(Node { id, kind, annotation: annotation.to_string() });
        for (slot, p) in inputs.iter().enumerate() {
            g.edges.push(Edge { src: p.node, port: p.port, dst: id, slot });
        }
        (g, id)
    }
}

fn conv_macs(c: &ConvSpec, out: (usize, usize, usize)) -> u64 {
    (out.1 * out.2 * c.out_channels * c.in_per_group() * c.kernel.0 * c.kernel.1) as u64
}

fn eval_node(
    node: &Node,
    args: &[&Tensor],
    inputs: &BTreeMap<String, Tensor>,
    outputs: &mut BTreeMap<String, Tensor>,
) -> Result<Vec<Tensor>> {
    let one = |t: Tensor| Ok(vec![t]);
    match &node.kind {
        NodeKind::Input { name, channels } => {
            let t = inputs.get(name).ok_or_else(|| Error::InvalidParams(format!("missing graph input {name:?}")))?;
            if t.shape().c != *channels {
                return Err(Error::shape(format!("input {name}"), "c", *channels, t.shape().c));
            }
            one(t.clone())
        }
        NodeKind::Output { name, .. } => {
            outputs.insert(name.clone(), args[0].clone());
            Ok(vec![])
        }
        NodeKind::Conv(c) => one(conv2d(args[0], c)?),
        NodeKind::BatchNorm(bn) => one(batch_norm(args[0], bn)?),
        NodeKind::Activation(k) => one(activation(args[0], *k)),
        NodeKind::Add => one(eltwise(EltwiseOp::Add, args)?),
        NodeKind::Concat => one(eltwise(EltwiseOp::ConcatChannels, args)?),
        NodeKind::Shuffle { groups } => one(channel_shuffle(args[0], *groups)?),
        NodeKind::Split { ways } => split_channels(args[0], *ways),
        NodeKind::RepBlock(r) => one(r.forward(args[0])?),
    }
}

/// Incremental graph construction with channel tracking.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    channels: HashMap<Port, usize>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn channels(&self, p: Port) -> usize {
        self.channels.get(&p).copied().unwrap_or(0)
    }

    /// Adds a node and returns its id. Channel bookkeeping is best effort;
    /// [`GraphIR::validate`] is the authority.
    pub fn node(&mut self, kind: NodeKind, annotation: &str, inputs: &[Port]) -> NodeId {
        let id = NodeId(self.nodes.len());
        let in_ch: Vec<usize> = inputs.iter().map(|&p| self.channels(p)).collect();
        let outs = kind.infer_channels(&in_ch).unwrap_or_else(|(_, found, _)| vec![found; kind.output_ports()]);
        for (port, c) in outs.into_iter().enumerate() {
            self.channels.insert(Port { node: id, port }, c);
        }
        for (slot, p) in inputs.iter().enumerate() {
            self.edges.push(Edge { src: p.node, port: p.port, dst: id, slot });
        }
        self.nodes.push(Node { id, kind, annotation: annotation.to_string() });
        id
    }

    pub fn input(&mut self, name: &str, channels: usize) -> Port {
        self.node(NodeKind::Input { name: name.into(), channels }, "", &[]).into()
    }

    pub fn output(&mut self, name: &str, from: Port, annotation: &str) -> NodeId {
        let channels = self.channels(from);
        self.node(NodeKind::Output { name: name.into(), channels }, annotation, &[from])
    }

    pub fn conv(&mut self, from: Port, spec: ConvSpec, annotation: &str) -> Port {
        self.node(NodeKind::Conv(spec), annotation, &[from]).into()
    }

    pub fn batch_norm(&mut self, from: Port, bn: BatchNormSpec, annotation: &str) -> Port {
        self.node(NodeKind::BatchNorm(bn), annotation, &[from]).into()
    }

    pub fn activation(&mut self, from: Port, kind: ActivationKind, annotation: &str) -> Port {
        self.node(NodeKind::Activation(kind), annotation, &[from]).into()
    }

    pub fn rep_block(&mut self, from: Port, spec: RepBlockSpec, annotation: &str) -> Port {
        self.node(NodeKind::RepBlock(spec), annotation, &[from]).into()
    }

    pub fn add(&mut self, inputs: &[Port], annotation: &str) -> Port {
        self.node(NodeKind::Add, annotation, inputs).into()
    }

    pub fn concat(&mut self, inputs: &[Port], annotation: &str) -> Port {
        self.node(NodeKind::Concat, annotation, inputs).into()
    }

    pub fn shuffle(&mut self, from: Port, groups: usize, annotation: &str) -> Port {
        self.node(NodeKind::Shuffle { groups }, annotation, &[from]).into()
    }

    pub fn split(&mut self, from: Port, ways: usize, annotation: &str) -> Vec<Port> {
        let id = self.node(NodeKind::Split { ways }, annotation, &[from]);
        (0..ways).map(|port| Port { node: id, port }).collect()
    }

    pub fn finish(self) -> GraphIR {
        GraphIR { nodes: self.nodes, edges: self.edges }
    }
}

/// Convenience: a single-input map for [`GraphIR::eval`].
pub fn single_input(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
    BTreeMap::from([(name.to_string(), t)])
}

/// Input shapes a graph expects for a batch of `n` images of `h × w`.
pub fn input_shapes(graph: &GraphIR, n: usize, h: usize, w: usize) -> Vec<(String, Shape)> {
    graph.input_decls().into_iter().map(|(name, c)| (name, Shape::new(n, c, h, w))).collect()
}
