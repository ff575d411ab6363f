//! Exact-algebra rewrites: batch-norm folding, multi-branch rep block fusion,
//! planned placement of rep blocks, implicit-knowledge folding and weight EMA.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::WeightContainer;
use crate::graph::{ConvBn, GraphIR, NodeId, NodeKind, Port, RepBlockSpec};
use crate::tensor::{BatchNormSpec, ConvSpec, Element, Shape, Tensor};

/// Folds inference-mode batch norm into the preceding convolution:
/// `W' = s * W`, `b' = beta + s * (b - mean)` with `s = gamma / sqrt(var + eps)`.
pub fn fold_bn<T: Element>(conv: &ConvSpec<T>, bn: &BatchNormSpec<T>) -> Result<ConvSpec<T>> {
    conv.validate()?;
    bn.validate()?;
    if bn.channels() != conv.out_channels {
        return Err(Error::shape("fold_bn", "channels", conv.out_channels, bn.channels()));
    }
    let per_out = conv.weight.len() / conv.out_channels;
    let mut out = conv.clone();
    for (o, (scale, _)) in bn.affine().into_iter().enumerate() {
        for w in &mut out.weight[o * per_out..(o + 1) * per_out] {
            *w = T::from_f64(scale * w.to_f64());
        }
        let b = bn.beta[o].to_f64() + scale * (conv.bias[o].to_f64() - bn.running_mean[o].to_f64());
        out.bias[o] = T::from_f64(b);
    }
    Ok(out)
}

/// Lifts a 1×1 convolution onto the 3×3 lattice: the original weight sits at
/// the kernel centre and padding grows by one, so outputs are unchanged for
/// any stride.
pub fn pad_1x1_to_3x3<T: Element>(conv: &ConvSpec<T>) -> Result<ConvSpec<T>> {
    conv.validate()?;
    if conv.kernel != (1, 1) {
        return Err(Error::InvalidParams(format!("pad_1x1_to_3x3 expects a 1x1 kernel, got {:?}", conv.kernel)));
    }
    if conv.padding != (0, 0) {
        return Err(Error::InvalidParams(format!("pad_1x1_to_3x3 expects zero padding, got {:?}", conv.padding)));
    }
    let mut out = ConvSpec::zeros(conv.in_channels, conv.out_channels, (3, 3), conv.stride, (1, 1), conv.groups)?;
    for o in 0..conv.out_channels {
        for i in 0..conv.in_per_group() {
            let idx = out.weight_index(o, i, 1, 1);
            out.weight[idx] = conv.weight[conv.weight_index(o, i, 0, 0)];
        }
    }
    out.bias.clone_from(&conv.bias);
    Ok(out)
}

/// A 3×3 (grouped) convolution computing the identity map.
pub fn identity_to_conv3x3<T: Element>(channels: usize, groups: usize) -> Result<ConvSpec<T>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::InvalidParams(format!(
            "identity conv: {channels} channels not divisible by {groups} groups"
        )));
    }
    let mut conv = ConvSpec::zeros(channels, channels, (3, 3), (1, 1), (1, 1), groups)?;
    let per_group = channels / groups;
    for o in 0..channels {
        let idx = conv.weight_index(o, o % per_group, 1, 1);
        conv.weight[idx] = T::from_f64(1.0);
    }
    Ok(conv)
}

/// Collapses a rep block into one 3×3 convolution. Each branch is folded
/// with its batch norm in `f64`, the 1×1 branch lifted and the identity
/// branch materialized, then kernels and biases are summed in the order
/// 3×3, 1×1, identity and rounded once to the storage type.
pub fn fuse_rep_block<T: Element>(rep: &RepBlockSpec<T>) -> Result<ConvSpec<T>> {
    rep.validate()?;
    let rep = rep.cast::<f64>();
    let mut branches = vec![fold_bn(&rep.dense.conv, &rep.dense.bn)?];
    if let Some(pw) = &rep.pointwise {
        branches.push(pad_1x1_to_3x3(&fold_bn(&pw.conv, &pw.bn)?)?);
    }
    if let Some(bn) = &rep.identity_bn {
        let id = identity_to_conv3x3::<f64>(rep.out_channels(), rep.groups())?;
        branches.push(fold_bn(&id, bn)?);
    }
    let mut fused = branches[0].clone();
    fused.stride = rep.dense.conv.stride;
    for b in &branches[1..] {
        for (w, v) in fused.weight.iter_mut().zip(&b.weight) {
            *w += v;
        }
        for (w, v) in fused.bias.iter_mut().zip(&b.bias) {
            *w += v;
        }
    }
    Ok(fused.cast())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    RepConv,
    RepConvN,
    NoReplacement,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::RepConv => "RepConv",
            Verdict::RepConvN => "RepConvN",
            Verdict::NoReplacement => "no-replacement",
        })
    }
}

/// Which structural rule decided a placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementRule {
    /// Output meets an `Add` that also receives a skip path from the input side.
    ResidualAdd,
    /// Output is an operand of a `Concat`.
    ConcatOperand,
    /// No residual or concatenation context, identity branch admissible.
    PlainChain,
    /// Plain context, but `in != out` or stride > 1 rules out an identity branch.
    IdentityInfeasible,
    /// 3×3 conv whose padding or stride cannot host aligned branches.
    UnalignedGeometry,
}

impl fmt::Display for PlacementRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlacementRule::ResidualAdd => "residual-add",
            PlacementRule::ConcatOperand => "concat-operand",
            PlacementRule::PlainChain => "plain-chain",
            PlacementRule::IdentityInfeasible => "identity-infeasible",
            PlacementRule::UnalignedGeometry => "unaligned-geometry",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedPlacement {
    pub node: NodeId,
    pub verdict: Verdict,
    pub rule: PlacementRule,
}

fn ancestors(graph: &GraphIR, id: NodeId) -> HashSet<NodeId> {
    let mut seen = HashSet::new();
    let mut queue: VecDeque<NodeId> = graph.inputs_of(id).into_iter().map(|p| p.node).collect();
    while let Some(n) = queue.pop_front() {
        if seen.insert(n) {
            queue.extend(graph.inputs_of(n).into_iter().map(|p| p.node));
        }
    }
    seen
}

/// Joins reached from `id` through shape-preserving or channel-routing nodes
/// (batch norm, activation, shuffle, split), as `(join node, arriving slot)`.
fn reached_joins(graph: &GraphIR, id: NodeId) -> Vec<(NodeId, usize)> {
    let mut joins = Vec::new();
    let mut seen = HashSet::new();
    let mut queue = VecDeque::from([id]);
    while let Some(n) = queue.pop_front() {
        if !seen.insert(n) {
            continue;
        }
        for (dst, slot) in graph.consumers_of(n) {
            match graph.node(dst).map(|d| &d.kind) {
                Some(NodeKind::Add | NodeKind::Concat) => joins.push((dst, slot)),
                Some(
                    NodeKind::BatchNorm(_)
                    | NodeKind::Activation(_)
                    | NodeKind::Shuffle { .. }
                    | NodeKind::Split { .. },
                ) => queue.push_back(dst),
                _ => {}
            }
        }
    }
    joins
}

fn has_skip_add(graph: &GraphIR, id: NodeId) -> bool {
    let joins = reached_joins(graph, id);
    if joins.is_empty() {
        return false;
    }
    let anc = ancestors(graph, id);
    joins.iter().any(|&(join, slot)| {
        matches!(graph.node(join).map(|n| &n.kind), Some(NodeKind::Add))
            && graph.edges().iter().filter(|e| e.dst == join && e.slot != slot).any(|e| anc.contains(&e.src))
    })
}

fn feeds_concat(graph: &GraphIR, id: NodeId) -> bool {
    reached_joins(graph, id)
        .iter()
        .any(|&(join, _)| matches!(graph.node(join).map(|n| &n.kind), Some(NodeKind::Concat)))
}

/// Decides, for every 3×3 convolution and every rep block, whether it may
/// carry a rep block with an identity branch (`RepConv`), only without one
/// (`RepConvN`), or not at all.
pub fn plan_reparam(graph: &GraphIR) -> Vec<PlannedPlacement> {
    graph
        .nodes()
        .iter()
        .filter_map(|n| {
            let (in_c, out_c, stride, padding) = match &n.kind {
                NodeKind::Conv(c) if c.kernel == (3, 3) => (c.in_channels, c.out_channels, c.stride, c.padding),
                NodeKind::RepBlock(r) => (r.in_channels(), r.out_channels(), r.dense.conv.stride, r.dense.conv.padding),
                _ => return None,
            };
            let (verdict, rule) = if padding != (1, 1) || stride.0 != stride.1 {
                (Verdict::NoReplacement, PlacementRule::UnalignedGeometry)
            } else if has_skip_add(graph, n.id) {
                (Verdict::RepConvN, PlacementRule::ResidualAdd)
            } else if feeds_concat(graph, n.id) {
                (Verdict::RepConvN, PlacementRule::ConcatOperand)
            } else if in_c != out_c || stride != (1, 1) {
                (Verdict::RepConvN, PlacementRule::IdentityInfeasible)
            } else {
                (Verdict::RepConv, PlacementRule::PlainChain)
            };
            Some(PlannedPlacement { node: n.id, verdict, rule })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewriteMode {
    /// Replace planned 3×3 convolutions by training-form rep blocks.
    Expand,
    /// Replace rep blocks by their fused single convolution.
    Fuse,
}

/// Training-form rep block equivalent to `conv` (optionally followed by
/// `bn`). New branches start at zero contribution: the 1×1 branch has zero
/// weights and the identity branch a zero-gamma batch norm.
pub fn rep_block_from_conv(conv: &ConvSpec, bn: Option<&BatchNormSpec>, with_identity: bool) -> Result<RepBlockSpec> {
    let c = conv.out_channels;
    let unit_bn = || BatchNormSpec::identity(c, 0.0);
    let pointwise = ConvSpec::zeros(conv.in_channels, c, (1, 1), conv.stride, (0, 0), conv.groups)?;
    let rep = RepBlockSpec {
        dense: ConvBn { conv: conv.clone(), bn: bn.cloned().unwrap_or_else(unit_bn) },
        pointwise: Some(ConvBn { conv: pointwise, bn: unit_bn() }),
        identity_bn: with_identity.then(|| BatchNormSpec { gamma: vec![0.0; c], ..unit_bn() }),
    };
    rep.validate()?;
    Ok(rep)
}

fn single_bn_consumer(graph: &GraphIR, id: NodeId) -> Option<(NodeId, BatchNormSpec)> {
    match graph.consumers_of(id).as_slice() {
        [(dst, _)] => match graph.node(*dst).map(|n| &n.kind) {
            Some(NodeKind::BatchNorm(bn)) => Some((*dst, bn.clone())),
            _ => None,
        },
        _ => None,
    }
}

/// Applies placements. Expand mode turns `RepConv` / `RepConvN` convolution
/// placements into rep blocks, absorbing a directly following batch norm;
/// fuse mode turns rep block placements into single convolutions. Other
/// placements are left alone.
pub fn apply_reparam(graph: &GraphIR, placements: &[PlannedPlacement], mode: RewriteMode) -> Result<GraphIR> {
    let mut g = graph.clone();
    for p in placements {
        let node = g
            .node(p.node)
            .ok_or_else(|| Error::Graph { node: p.node.0, reason: "placement references a missing node".into() })?;
        match (mode, &node.kind) {
            (RewriteMode::Expand, NodeKind::Conv(conv)) if p.verdict != Verdict::NoReplacement => {
                let conv = conv.clone();
                let absorbed = single_bn_consumer(&g, p.node);
                let rep =
                    rep_block_from_conv(&conv, absorbed.as_ref().map(|(_, bn)| bn), p.verdict == Verdict::RepConv)
                        .map_err(|e| Error::at_node(p.node.0, e))?;
                if let Some((bn_id, _)) = absorbed {
                    g = g.bypass(bn_id)?;
                }
                g = g.with_kind(p.node, NodeKind::RepBlock(rep))?;
            }
            (RewriteMode::Fuse, NodeKind::RepBlock(rep)) => {
                let fused = fuse_rep_block(rep).map_err(|e| Error::at_node(p.node.0, e))?;
                g = g.with_kind(p.node, NodeKind::Conv(fused))?;
            }
            _ => {}
        }
    }
    Ok(g)
}

/// Folds every batch norm that directly follows a convolution (and is that
/// convolution's only consumer) into the convolution.
pub fn fold_batchnorm_nodes(graph: &GraphIR) -> Result<GraphIR> {
    let mut g = graph.clone();
    let bn_ids: Vec<NodeId> =
        graph.nodes().iter().filter(|n| matches!(n.kind, NodeKind::BatchNorm(_))).map(|n| n.id).collect();
    for id in bn_ids {
        let inputs = g.inputs_of(id);
        let [Port { node: src, port: 0 }] = inputs.as_slice() else { continue };
        let (Some(NodeKind::Conv(conv)), Some(NodeKind::BatchNorm(bn))) =
            (g.node(*src).map(|n| &n.kind), g.node(id).map(|n| &n.kind))
        else {
            continue;
        };
        if g.consumers_of(*src).len() != 1 {
            continue;
        }
        let folded = fold_bn(conv, bn).map_err(|e| Error::at_node(id.0, e))?;
        g = g.with_kind(*src, NodeKind::Conv(folded))?.bypass(id)?;
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImplicitCombine {
    Addition,
    Multiplication,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImplicitPosition {
    BeforeConv,
    AfterConv,
}

/// A learned per-channel vector combined with a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitKnowledge<T: Element = f32> {
    pub vector: Vec<T>,
    pub combine: ImplicitCombine,
    pub position: ImplicitPosition,
}

/// Explicit combination of a per-channel vector with a feature map.
pub fn apply_implicit<T: Element>(x: &Tensor<T>, vector: &[T], combine: ImplicitCombine) -> Result<Tensor<T>> {
    let s: Shape = x.shape();
    if vector.len() != s.c {
        return Err(Error::shape("implicit vector", "len", s.c, vector.len()));
    }
    Tensor::from_fn(s, |[n, c, h, w]| {
        let (v, k) = (x.get(n, c, h, w).to_f64(), vector[c].to_f64());
        T::from_f64(match combine {
            ImplicitCombine::Addition => v + k,
            ImplicitCombine::Multiplication => v * k,
        })
    })
}

/// Folds implicit knowledge into the adjacent convolution.
///
/// Additive knowledge before the convolution only commutes with it where no
/// zero padding is read, so that case requires padding `(0, 0)`.
pub fn fold_implicit<T: Element>(conv: &ConvSpec<T>, ik: &ImplicitKnowledge<T>) -> Result<ConvSpec<T>> {
    conv.validate()?;
    let expected = match ik.position {
        ImplicitPosition::BeforeConv => conv.in_channels,
        ImplicitPosition::AfterConv => conv.out_channels,
    };
    if ik.vector.len() != expected {
        return Err(Error::shape("implicit vector", "len", expected, ik.vector.len()));
    }
    let v: Vec<f64> = ik.vector.iter().map(|x| x.to_f64()).collect();
    let mut out = conv.clone();
    let (kh, kw) = conv.kernel;
    let cin_g = conv.in_per_group();
    let cout_g = conv.out_per_group();
    match (ik.position, ik.combine) {
        (ImplicitPosition::AfterConv, ImplicitCombine::Multiplication) => {
            let per_out = conv.weight.len() / conv.out_channels;
            for o in 0..conv.out_channels {
                for w in &mut out.weight[o * per_out..(o + 1) * per_out] {
                    *w = T::from_f64(w.to_f64() * v[o]);
                }
                out.bias[o] = T::from_f64(conv.bias[o].to_f64() * v[o]);
            }
        }
        (ImplicitPosition::AfterConv, ImplicitCombine::Addition) => {
            for o in 0..conv.out_channels {
                out.bias[o] = T::from_f64(conv.bias[o].to_f64() + v[o]);
            }
        }
        (ImplicitPosition::BeforeConv, ImplicitCombine::Multiplication) => {
            for o in 0..conv.out_channels {
                let group = o / cout_g;
                for i in 0..cin_g {
                    for u in 0..kh {
                        for w in 0..kw {
                            let idx = conv.weight_index(o, i, u, w);
                            out.weight[idx] = T::from_f64(conv.weight[idx].to_f64() * v[group * cin_g + i]);
                        }
                    }
                }
            }
        }
        (ImplicitPosition::BeforeConv, ImplicitCombine::Addition) => {
            if conv.padding != (0, 0) {
                return Err(Error::InvalidParams(format!(
                    "additive implicit knowledge before a conv needs padding (0, 0), got {:?}",
                    conv.padding
                )));
            }
            for o in 0..conv.out_channels {
                let group = o / cout_g;
                let mut acc = conv.bias[o].to_f64();
                for i in 0..cin_g {
                    for u in 0..kh {
                        for w in 0..kw {
                            acc += conv.weight[conv.weight_index(o, i, u, w)].to_f64() * v[group * cin_g + i];
                        }
                    }
                }
                out.bias[o] = T::from_f64(acc);
            }
        }
    }
    Ok(out)
}

/// `ema' = decay * ema + (1 - decay) * new`, per scalar.
pub fn ema_update(current: &WeightContainer, new: &WeightContainer, decay: f64) -> Result<WeightContainer> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidParams(format!("ema decay must lie in [0, 1], got {decay}")));
    }
    if current.records().len() != new.records().len() {
        return Err(Error::shape("ema weight sets", "records", current.records().len(), new.records().len()));
    }
    let mut out = WeightContainer::new();
    for (a, b) in current.records().iter().zip(new.records()) {
        if a.name != b.name || a.dims != b.dims {
            return Err(Error::InvalidParams(format!(
                "ema weight sets differ at record {:?} {:?} vs {:?} {:?}",
                a.name, a.dims, b.name, b.dims
            )));
        }
        let data =
            a.data.iter().zip(&b.data).map(|(&e, &n)| (decay * e as f64 + (1.0 - decay) * n as f64) as f32).collect();
        out.push(&a.name, a.dims.clone(), data)?;
    }
    Ok(out)
}

/// Ids of rep blocks that are still carrying an identity branch where the
/// plan forbids one.
pub fn identity_conflicts(graph: &GraphIR, placements: &[PlannedPlacement]) -> BTreeSet<NodeId> {
    placements
        .iter()
        .filter(|p| p.verdict != Verdict::RepConv)
        .filter(|p| matches!(graph.node(p.node).map(|n| &n.kind), Some(NodeKind::RepBlock(r)) if r.has_identity()))
        .map(|p| p.node)
        .collect()
}
