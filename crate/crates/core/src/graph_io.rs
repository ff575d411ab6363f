//! Graph files: topology and geometry as TOML, weights in an `RPKW`
//! container with records named after node ids (`n3.weight`,
//! `n4.running_var`, `n7.pointwise.bn.gamma`, ...).

use std::cell::Cell;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::WeightContainer;
use crate::graph::{ConvBn, Edge, GraphIR, Node, NodeId, NodeKind, RepBlockSpec};
use crate::tensor::{ActivationKind, BatchNormSpec, ConvSpec};

const GRAPH_FORMAT: &str = "rpk-graph";
const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    format: String,
    version: u32,
    #[serde(default)]
    nodes: Vec<NodeEntry>,
    #[serde(default)]
    edges: Vec<EdgeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeEntry {
    id: usize,
    #[serde(default)]
    annotation: String,
    #[serde(flatten)]
    desc: NodeDesc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum NodeDesc {
    Input {
        name: String,
        channels: usize,
    },
    Output {
        name: String,
        channels: usize,
    },
    Conv(ConvDesc),
    BatchNorm {
        channels: usize,
        eps: f64,
    },
    Activation {
        activation: ActivationKind,
    },
    Add,
    Concat,
    Shuffle {
        groups: usize,
    },
    Split {
        ways: usize,
    },
    RepBlock {
        dense: ConvDesc,
        dense_eps: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pointwise: Option<ConvDesc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pointwise_eps: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        identity_eps: Option<f64>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvDesc {
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
    groups: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeEntry {
    src: usize,
    port: usize,
    dst: usize,
    slot: usize,
}

fn conv_desc(c: &ConvSpec) -> ConvDesc {
    ConvDesc {
        in_channels: c.in_channels,
        out_channels: c.out_channels,
        kernel: [c.kernel.0, c.kernel.1],
        stride: [c.stride.0, c.stride.1],
        padding: [c.padding.0, c.padding.1],
        groups: c.groups,
    }
}

fn push_conv(w: &mut WeightContainer, prefix: &str, c: &ConvSpec) -> Result<()> {
    let dims = [c.out_channels, c.in_per_group(), c.kernel.0, c.kernel.1].map(|d| d as u32).to_vec();
    w.push(&format!("{prefix}.weight"), dims, c.weight.clone())?;
    w.push(&format!("{prefix}.bias"), vec![c.out_channels as u32], c.bias.clone())
}

fn push_bn(w: &mut WeightContainer, prefix: &str, bn: &BatchNormSpec) -> Result<()> {
    let dims = vec![bn.channels() as u32];
    for (field, v) in
        [("gamma", &bn.gamma), ("beta", &bn.beta), ("running_mean", &bn.running_mean), ("running_var", &bn.running_var)]
    {
        w.push(&format!("{prefix}.{field}"), dims.clone(), v.clone())?;
    }
    Ok(())
}

/// Topology TOML and weight container for `graph`.
pub fn encode_graph(graph: &GraphIR) -> Result<(String, WeightContainer)> {
    let mut weights = WeightContainer::new();
    let mut nodes = Vec::with_capacity(graph.nodes().len());
    for n in graph.nodes() {
        let p = format!("n{}", n.id.0);
        let desc = match &n.kind {
            NodeKind::Input { name, channels } => NodeDesc::Input { name: name.clone(), channels: *channels },
            NodeKind::Output { name, channels } => NodeDesc::Output { name: name.clone(), channels: *channels },
            NodeKind::Conv(c) => {
                push_conv(&mut weights, &p, c)?;
                NodeDesc::Conv(conv_desc(c))
            }
            NodeKind::BatchNorm(bn) => {
                push_bn(&mut weights, &p, bn)?;
                NodeDesc::BatchNorm { channels: bn.channels(), eps: bn.eps }
            }
            NodeKind::Activation(a) => NodeDesc::Activation { activation: *a },
            NodeKind::Add => NodeDesc::Add,
            NodeKind::Concat => NodeDesc::Concat,
            NodeKind::Shuffle { groups } => NodeDesc::Shuffle { groups: *groups },
            NodeKind::Split { ways } => NodeDesc::Split { ways: *ways },
            NodeKind::RepBlock(r) => {
                push_conv(&mut weights, &format!("{p}.dense"), &r.dense.conv)?;
                push_bn(&mut weights, &format!("{p}.dense.bn"), &r.dense.bn)?;
                if let Some(pw) = &r.pointwise {
                    push_conv(&mut weights, &format!("{p}.pointwise"), &pw.conv)?;
                    push_bn(&mut weights, &format!("{p}.pointwise.bn"), &pw.bn)?;
                }
                if let Some(bn) = &r.identity_bn {
                    push_bn(&mut weights, &format!("{p}.identity.bn"), bn)?;
                }
                NodeDesc::RepBlock {
                    dense: conv_desc(&r.dense.conv),
                    dense_eps: r.dense.bn.eps,
                    pointwise: r.pointwise.as_ref().map(|pw| conv_desc(&pw.conv)),
                    pointwise_eps: r.pointwise.as_ref().map(|pw| pw.bn.eps),
                    identity_eps: r.identity_bn.as_ref().map(|bn| bn.eps),
                }
            }
        };
        nodes.push(NodeEntry { id: n.id.0, annotation: n.annotation.clone(), desc });
    }
    let edges =
        graph.edges().iter().map(|e| EdgeEntry { src: e.src.0, port: e.port, dst: e.dst.0, slot: e.slot }).collect();
    let file = GraphFile { format: GRAPH_FORMAT.into(), version: GRAPH_VERSION, nodes, edges };
    let text = toml::to_string(&file).map_err(|e| Error::Format(e.to_string()))?;
    Ok((text, weights))
}

struct Take<'a> {
    weights: &'a WeightContainer,
    used: Cell<usize>,
}

impl Take<'_> {
    fn record(&self, name: &str, dims: &[usize]) -> Result<Vec<f32>> {
        let r = self.weights.get(name).ok_or_else(|| Error::Format(format!("missing weight record {name:?}")))?;
        let want: Vec<u32> = dims.iter().map(|&d| d as u32).collect();
        if r.dims != want {
            return Err(Error::Format(format!("record {name:?} has dims {:?}, expected {want:?}", r.dims)));
        }
        self.used.set(self.used.get() + 1);
        Ok(r.data.clone())
    }

    fn conv(&self, prefix: &str, d: &ConvDesc) -> Result<ConvSpec> {
        let mut c = ConvSpec::zeros(
            d.in_channels,
            d.out_channels,
            (d.kernel[0], d.kernel[1]),
            (d.stride[0], d.stride[1]),
            (d.padding[0], d.padding[1]),
            d.groups,
        )?;
        c.weight =
            self.record(&format!("{prefix}.weight"), &[c.out_channels, c.in_per_group(), c.kernel.0, c.kernel.1])?;
        c.bias = self.record(&format!("{prefix}.bias"), &[c.out_channels])?;
        Ok(c)
    }

    fn bn(&self, prefix: &str, channels: usize, eps: f64) -> Result<BatchNormSpec> {
        let get = |f: &str| self.record(&format!("{prefix}.{f}"), &[channels]);
        let bn = BatchNormSpec {
            gamma: get("gamma")?,
            beta: get("beta")?,
            running_mean: get("running_mean")?,
            running_var: get("running_var")?,
            eps,
        };
        bn.validate()?;
        Ok(bn)
    }
}

/// Rebuilds a graph from its TOML description and weight container.
pub fn decode_graph(text: &str, weights: &WeightContainer) -> Result<GraphIR> {
    let file: GraphFile = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if file.format != GRAPH_FORMAT || file.version != GRAPH_VERSION {
        return Err(Error::Format(format!("unsupported graph file {:?} version {}", file.format, file.version)));
    }
    let take = Take { weights, used: Cell::new(0) };
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for entry in file.nodes {
        let p = format!("n{}", entry.id);
        let kind = match entry.desc {
            NodeDesc::Input { name, channels } => NodeKind::Input { name, channels },
            NodeDesc::Output { name, channels } => NodeKind::Output { name, channels },
            NodeDesc::Conv(d) => NodeKind::Conv(take.conv(&p, &d)?),
            NodeDesc::BatchNorm { channels, eps } => NodeKind::BatchNorm(take.bn(&p, channels, eps)?),
            NodeDesc::Activation { activation } => NodeKind::Activation(activation),
            NodeDesc::Add => NodeKind::Add,
            NodeDesc::Concat => NodeKind::Concat,
            NodeDesc::Shuffle { groups } => NodeKind::Shuffle { groups },
            NodeDesc::Split { ways } => NodeKind::Split { ways },
            NodeDesc::RepBlock { dense, dense_eps, pointwise, pointwise_eps, identity_eps } => {
                let c = dense.out_channels;
                let dense = ConvBn {
                    conv: take.conv(&format!("{p}.dense"), &dense)?,
                    bn: take.bn(&format!("{p}.dense.bn"), c, dense_eps)?,
                };
                let pointwise = match pointwise {
                    Some(d) => Some(ConvBn {
                        conv: take.conv(&format!("{p}.pointwise"), &d)?,
                        bn: take.bn(&format!("{p}.pointwise.bn"), c, pointwise_eps.unwrap_or(dense_eps))?,
                    }),
                    None => None,
                };
                let identity_bn = identity_eps.map(|eps| take.bn(&format!("{p}.identity.bn"), c, eps)).transpose()?;
                let spec = RepBlockSpec { dense, pointwise, identity_bn };
                spec.validate().map_err(|e| Error::at_node(entry.id, e))?;
                NodeKind::RepBlock(spec)
            }
        };
        nodes.push(Node { id: NodeId(entry.id), kind, annotation: entry.annotation });
    }
    if take.used.get() != weights.records().len() {
        return Err(Error::Format(format!(
            "weight container holds {} records, the graph uses {}",
            weights.records().len(),
            take.used.get()
        )));
    }
    let edges = file
        .edges
        .into_iter()
        .map(|e| Edge { src: NodeId(e.src), port: e.port, dst: NodeId(e.dst), slot: e.slot })
        .collect();
    Ok(GraphIR::new(nodes, edges))
}

pub fn save_graph(graph: &GraphIR, graph_path: &Path, weights_path: &Path) -> Result<()> {
    let (text, weights) = encode_graph(graph)?;
    std::fs::write(graph_path, text).map_err(|e| Error::Format(format!("{}: {e}", graph_path.display())))?;
    weights.write(weights_path)
}

pub fn load_graph(graph_path: &Path, weights_path: &Path) -> Result<GraphIR> {
    let text =
        std::fs::read_to_string(graph_path).map_err(|e| Error::Format(format!("{}: {e}", graph_path.display())))?;
    let weights = WeightContainer::read(weights_path)?;
    decode_graph(&text, &weights).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", graph_path.display())),
        other => other,
    })
}
