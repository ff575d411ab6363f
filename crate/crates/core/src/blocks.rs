//! Block constructors: ELAN, E-ELAN, planned rep-block ELAN variants and the
//! dark / reversed-dark CSP blocks.
//!
//! Every convolution is followed by batch norm and the configured
//! activation. Graphs read input `"x"` and write output `"y"`.
//!
//! With `unit(i, o, k, g) = o * (i / g) * k^2 + o + 4o` (conv weights, bias,
//! batch norm) the parameter counts are
//!
//! ```text
//! ELAN    2 unit(in, c, 1, 1) + 2d unit(c, c, 3, 1) + unit((2 + d) c, T, 1, 1)
//! E-ELAN  2 unit(in, c g, 1, 1)
//!         + d (unit(c g, c g m, 3, g) + unit(c g m, c g, 3, g))
//!         + unit((2 + d) c, T, 1, 1)
//! CSP     2 unit(C, C/2, 1, 1) + unit(C/2, C/2, 1, 1) + unit(C/2, C/2, 3, 1) + unit(C, C, 1, 1)
//! ```
//!
//! E-ELAN widens each stem and computational unit `g`-fold (cardinality) and
//! runs the 3×3 pairs as `g`-group convolutions with hidden width `c g m`.
//! Each branch output is shuffled and split into `g` parts of `c` channels;
//! the concatenation is laid out group-major and split into `g` groups that
//! are summed, so the merged width is the ELAN concat width `(2 + d) c` and
//! the transition is the ELAN transition.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    ConvBn, GraphBuilder, GraphIR, NodeId, NodeKind, Port, RepBlockSpec, COMPUTATIONAL_BLOCK, MERGE, STEM, TRANSITION,
};
use crate::init::WeightInit;
use crate::tensor::ActivationKind;

pub const INPUT_NAME: &str = "x";
pub const OUTPUT_NAME: &str = "y";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElanConfig {
    pub in_channels: usize,
    pub branch_channels: usize,
    pub depth: usize,
    pub transition_channels: usize,
    pub activation: ActivationKind,
}

impl ElanConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("branch_channels", self.branch_channels),
            ("transition_channels", self.transition_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn concat_channels(&self) -> usize {
        (2 + self.depth) * self.branch_channels
    }

    pub fn param_count(&self) -> u64 {
        let (i, c, d, t) = (self.in_channels, self.branch_channels, self.depth, self.transition_channels);
        2 * unit_params(i, c, 1, 1)
            + 2 * d as u64 * unit_params(c, c, 3, 1)
            + unit_params(self.concat_channels(), t, 1, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EelanConfig {
    pub elan: ElanConfig,
    pub groups: usize,
    pub multiplier: usize,
}

impl EelanConfig {
    pub fn validate(&self) -> Result<()> {
        self.elan.validate()?;
        if self.groups == 0 || self.multiplier == 0 {
            return Err(Error::Config("groups and multiplier must be positive".into()));
        }
        if self.elan.branch_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "branch_channels {} is not divisible by groups {}",
                self.elan.branch_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Width of each stem / computational unit output before the merge.
    pub fn expanded_channels(&self) -> usize {
        self.elan.branch_channels * self.groups
    }

    pub fn param_count(&self) -> u64 {
        let e = &self.elan;
        let cg = self.expanded_channels();
        let hidden = cg * self.multiplier;
        2 * unit_params(e.in_channels, cg, 1, 1)
            + e.depth as u64 * (unit_params(cg, hidden, 3, self.groups) + unit_params(hidden, cg, 3, self.groups))
            + unit_params(e.concat_channels(), e.transition_channels, 1, 1)
    }
}

/// Parameters of conv (with bias) + batch norm.
pub fn unit_params(i: usize, o: usize, k: usize, g: usize) -> u64 {
    (o * (i / g) * k * k + 5 * o) as u64
}

struct Net<'a> {
    b: GraphBuilder,
    init: &'a mut WeightInit,
    act: ActivationKind,
}

impl<'a> Net<'a> {
    fn new(in_channels: usize, act: ActivationKind, init: &'a mut WeightInit) -> (Self, Port) {
        let mut b = GraphBuilder::new();
        let x = b.input(INPUT_NAME, in_channels);
        (Net { b, init, act }, x)
    }

    fn conv_bn(&mut self, from: Port, out: usize, k: usize, groups: usize) -> Result<ConvBn> {
        let conv = self.init.conv(self.b.channels(from), out, k, 1, groups)?;
        Ok(ConvBn { conv, bn: self.init.batch_norm(out) })
    }

    fn cba(&mut self, from: Port, out: usize, k: usize, groups: usize, ann: &str) -> Result<Port> {
        let cb = self.conv_bn(from, out, k, groups)?;
        let c = self.b.conv(from, cb.conv, ann);
        let n = self.b.batch_norm(c, cb.bn, ann);
        Ok(self.b.activation(n, self.act, ann))
    }

    fn rep(&mut self, from: Port, out: usize, identity: bool, ann: &str) -> Result<Port> {
        let dense = self.conv_bn(from, out, 3, 1)?;
        let pointwise = Some(self.conv_bn(from, out, 1, 1)?);
        let identity_bn = identity.then(|| self.init.batch_norm(out));
        let spec = RepBlockSpec { dense, pointwise, identity_bn };
        spec.validate()?;
        let r = self.b.rep_block(from, spec, ann);
        Ok(self.b.activation(r, self.act, ann))
    }

    fn finish(mut self, out: Port) -> Result<GraphIR> {
        self.b.output(OUTPUT_NAME, out, "");
        let g = self.b.finish();
        let report = g.validate();
        if !report.is_empty() {
            return Err(Error::Invalid(report.to_string()));
        }
        Ok(g)
    }
}

fn elan_with(cfg: &ElanConfig, rep_taps: &[usize], init: &mut WeightInit) -> Result<GraphIR> {
    cfg.validate()?;
    let c = cfg.branch_channels;
    let (mut net, x) = Net::new(cfg.in_channels, cfg.activation, init);
    let s1 = net.cba(x, c, 1, 1, STEM)?;
    let s2 = net.cba(x, c, 1, 1, STEM)?;
    let mut branches = vec![s1, s2];
    let mut h = s2;
    for unit in 1..=cfg.depth {
        h = net.cba(h, c, 3, 1, COMPUTATIONAL_BLOCK)?;
        h = if rep_taps.contains(&unit) {
            net.rep(h, c, false, COMPUTATIONAL_BLOCK)?
        } else {
            net.cba(h, c, 3, 1, COMPUTATIONAL_BLOCK)?
        };
        branches.push(h);
    }
    let cat = net.b.concat(&branches, "");
    let t = net.cba(cat, cfg.transition_channels, 1, 1, TRANSITION)?;
    net.finish(t)
}

pub fn build_elan(cfg: &ElanConfig, init: &mut WeightInit) -> Result<GraphIR> {
    elan_with(cfg, &[], init)
}

pub fn build_eelan(cfg: &EelanConfig, init: &mut WeightInit) -> Result<GraphIR> {
    cfg.validate()?;
    let e = &cfg.elan;
    let (g, cg) = (cfg.groups, cfg.expanded_channels());
    let (mut net, x) = Net::new(e.in_channels, e.activation, init);
    let s1 = net.cba(x, cg, 1, 1, STEM)?;
    let s2 = net.cba(x, cg, 1, 1, STEM)?;
    let mut branches = vec![s1, s2];
    let mut h = s2;
    for _ in 0..e.depth {
        h = net.cba(h, cg * cfg.multiplier, 3, g, COMPUTATIONAL_BLOCK)?;
        h = net.cba(h, cg, 3, g, COMPUTATIONAL_BLOCK)?;
        branches.push(h);
    }
    let parts: Vec<Vec<Port>> = branches
        .iter()
        .map(|&p| {
            let s = net.b.shuffle(p, g, MERGE);
            net.b.split(s, g, MERGE)
        })
        .collect();
    let group_major: Vec<Port> = (0..g).flat_map(|k| parts.iter().map(move |bp| bp[k])).collect();
    let cat = net.b.concat(&group_major, MERGE);
    let groups = net.b.split(cat, g, MERGE);
    let merged = net.b.add(&groups, MERGE);
    let t = net.cba(merged, e.transition_channels, 1, 1, TRANSITION)?;
    net.finish(t)
}

/// Rep-block placements over a 3-unit ELAN. Letters name sets of tapped
/// computational convs (1-based unit index) carried as identity-free rep
/// blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlannedVariant {
    Base,
    A,
    B,
    C,
    D,
    E,
}

impl PlannedVariant {
    pub const ALL: [PlannedVariant; 6] = [Self::Base, Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn rep_units(self) -> &'static [usize] {
        match self {
            Self::Base => &[],
            Self::A => &[1],
            Self::B => &[2],
            Self::C => &[3],
            Self::D => &[2, 3],
            Self::E => &[1, 2, 3],
        }
    }
}

impl fmt::Display for PlannedVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
            Self::E => "e",
        })
    }
}

impl FromStr for PlannedVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown planned variant {s:?} (expected base or a-e)")))
    }
}

pub const PLANNED_REP_ELAN: ElanConfig = ElanConfig {
    in_channels: 64,
    branch_channels: 32,
    depth: 3,
    transition_channels: 128,
    activation: ActivationKind::Silu,
};

pub fn build_planned_rep_elan(variant: PlannedVariant, init: &mut WeightInit) -> Result<GraphIR> {
    build_planned_rep_elan_with(&PLANNED_REP_ELAN, variant, init)
}

pub fn build_planned_rep_elan_with(
    cfg: &ElanConfig,
    variant: PlannedVariant,
    init: &mut WeightInit,
) -> Result<GraphIR> {
    let units = variant.rep_units();
    if let Some(&max) = units.iter().max() {
        if max > cfg.depth {
            return Err(Error::Config(format!("variant {variant} needs depth >= {max}, got {}", cfg.depth)));
        }
    }
    elan_with(cfg, units, init)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CspKind {
    /// Residual unit 1×1 then 3×3.
    Dark,
    /// Residual unit 3×3 then 1×1.
    Reversed,
}

/// CSP block on `channels` inputs: one half runs a residual unit, the other
/// half is a plain 1×1 projection; both are concatenated and mixed by a 1×1
/// transition. With `rep`, the 3×3 is a rep block, identity-free where its
/// output meets the residual add.
pub fn build_csp_block(
    kind: CspKind,
    channels: usize,
    rep: bool,
    activation: ActivationKind,
    init: &mut WeightInit,
) -> Result<GraphIR> {
    if channels < 2 || channels % 2 != 0 {
        return Err(Error::Config(format!("csp block needs an even positive channel count, got {channels}")));
    }
    let h = channels / 2;
    let (mut net, x) = Net::new(channels, activation, init);
    let a = net.cba(x, h, 1, 1, STEM)?;
    let r = match kind {
        CspKind::Dark => {
            let p = net.cba(a, h, 1, 1, COMPUTATIONAL_BLOCK)?;
            if rep {
                net.rep(p, h, false, COMPUTATIONAL_BLOCK)?
            } else {
                net.cba(p, h, 3, 1, COMPUTATIONAL_BLOCK)?
            }
        }
        CspKind::Reversed => {
            let p =
                if rep { net.rep(a, h, true, COMPUTATIONAL_BLOCK)? } else { net.cba(a, h, 3, 1, COMPUTATIONAL_BLOCK)? };
            net.cba(p, h, 1, 1, COMPUTATIONAL_BLOCK)?
        }
    };
    let res = net.b.add(&[a, r], "");
    let b = net.cba(x, h, 1, 1, STEM)?;
    let cat = net.b.concat(&[res, b], "");
    let t = net.cba(cat, channels, 1, 1, TRANSITION)?;
    net.finish(t)
}

pub fn csp_param_count(channels: usize) -> u64 {
    let h = channels / 2;
    2 * unit_params(channels, h, 1, 1)
        + unit_params(h, h, 1, 1)
        + unit_params(h, h, 3, 1)
        + unit_params(channels, channels, 1, 1)
}

/// Largest number of conv / rep-block nodes on any path from an input to
/// (excluding) node `to`.
pub fn conv_path_length(graph: &GraphIR, to: NodeId) -> Result<usize> {
    let order = graph.topo_order().map_err(|_| Error::Invalid("graph has a cycle".into()))?;
    let mut depth: HashMap<NodeId, usize> = HashMap::new();
    for id in order {
        let before = graph.inputs_of(id).iter().map(|p| depth[&p.node]).max().unwrap_or(0);
        if id == to {
            return Ok(before);
        }
        let own = matches!(graph.node(id).map(|n| &n.kind), Some(NodeKind::Conv(_) | NodeKind::RepBlock(_)));
        depth.insert(id, before + usize::from(own));
    }
    Err(Error::Graph { node: to.0, reason: "no such node".into() })
}

/// The transition conv of a block graph.
pub fn transition_node(graph: &GraphIR) -> Option<NodeId> {
    graph.nodes().iter().find(|n| n.annotation == TRANSITION && matches!(n.kind, NodeKind::Conv(_))).map(|n| n.id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::single_input;
    use crate::tensor::{Shape, Tensor};

    fn elan(i: usize, c: usize, d: usize, t: usize) -> ElanConfig {
        ElanConfig {
            in_channels: i,
            branch_channels: c,
            depth: d,
            transition_channels: t,
            activation: ActivationKind::Silu,
        }
    }

    fn transition_in(g: &GraphIR) -> usize {
        match &g.node(transition_node(g).unwrap()).unwrap().kind {
            NodeKind::Conv(c) => c.in_channels,
            _ => unreachable!(),
        }
    }

    fn run(g: &GraphIR, c: usize, hw: usize) -> Tensor {
        let x = WeightInit::new(99).tensor(Shape::new(1, c, hw, hw), 1.0).unwrap();
        g.eval(&single_input(INPUT_NAME, x)).unwrap().remove(OUTPUT_NAME).unwrap()
    }

    #[test]
    fn elan_widths() {
        let g = build_elan(&elan(16, 8, 0, 8), &mut WeightInit::new(0)).unwrap();
        assert_eq!(transition_in(&g), 16);
        let cfg = elan(64, 32, 4, 64);
        let g = build_elan(&cfg, &mut WeightInit::new(0)).unwrap();
        assert_eq!(transition_in(&g), 192);
        assert_eq!(g.count_params().total, cfg.param_count());
        assert_eq!(run(&g, 64, 32).shape(), Shape::new(1, 64, 32, 32));
        assert!(build_elan(&elan(0, 8, 1, 8), &mut WeightInit::new(0)).is_err());
    }

    #[test]
    fn elan_annotations() {
        let g = build_elan(&elan(8, 8, 2, 8), &mut WeightInit::new(0)).unwrap();
        let count =
            |a: &str| g.nodes().iter().filter(|n| n.annotation == a && matches!(n.kind, NodeKind::Conv(_))).count();
        assert_eq!(count(STEM), 2);
        assert_eq!(count(COMPUTATIONAL_BLOCK), 4);
        assert_eq!(count(TRANSITION), 1);
    }

    #[test]
    fn eelan_degenerate_matches_elan_shape() {
        let base = elan(16, 8, 2, 16);
        let e = EelanConfig { elan: base.clone(), groups: 1, multiplier: 1 };
        let ge = build_eelan(&e, &mut WeightInit::new(1)).unwrap();
        let gb = build_elan(&base, &mut WeightInit::new(1)).unwrap();
        assert_eq!(run(&ge, 16, 8).shape(), run(&gb, 16, 8).shape());
        assert_eq!(ge.count_params().total, gb.count_params().total);
    }

    #[test]
    fn eelan_merge_width_and_params() {
        let e = EelanConfig { elan: elan(32, 16, 2, 32), groups: 2, multiplier: 2 };
        let g = build_eelan(&e, &mut WeightInit::new(2)).unwrap();
        assert_eq!(transition_in(&g), e.elan.concat_channels());
        assert_eq!(g.count_params().total, e.param_count());
        assert!(e.param_count() > e.elan.param_count());
        let t = transition_node(&g).unwrap();
        let gb = build_elan(&e.elan, &mut WeightInit::new(2)).unwrap();
        assert_eq!(conv_path_length(&g, t).unwrap(), conv_path_length(&gb, transition_node(&gb).unwrap()).unwrap());
        assert_eq!(conv_path_length(&g, t).unwrap(), 1 + 2 * 2);
        assert_eq!(run(&g, 32, 8).shape(), Shape::new(1, 32, 8, 8));
    }

    #[test]
    fn eelan_rejects_indivisible_groups() {
        let e = EelanConfig { elan: elan(32, 12, 2, 32), groups: 8, multiplier: 1 };
        assert!(build_eelan(&e, &mut WeightInit::new(0)).is_err());
    }

    #[test]
    fn planned_variants() {
        for v in PlannedVariant::ALL {
            let g = build_planned_rep_elan(v, &mut WeightInit::new(3)).unwrap();
            let reps: Vec<_> = g
                .nodes()
                .iter()
                .filter_map(|n| match &n.kind {
                    NodeKind::RepBlock(r) => Some(r.has_identity()),
                    _ => None,
                })
                .collect();
            assert_eq!(reps.len(), v.rep_units().len());
            assert!(reps.iter().all(|&id| !id));
        }
        assert!("f".parse::<PlannedVariant>().is_err());
        assert_eq!("D".parse::<PlannedVariant>().unwrap(), PlannedVariant::D);
        assert!(build_planned_rep_elan_with(&elan(8, 8, 1, 8), PlannedVariant::C, &mut WeightInit::new(0)).is_err());
    }

    #[test]
    fn csp_blocks() {
        let dark =
            build_csp_block(CspKind::Dark, 16, false, ActivationKind::LeakyRelu, &mut WeightInit::new(4)).unwrap();
        let rev =
            build_csp_block(CspKind::Reversed, 16, false, ActivationKind::LeakyRelu, &mut WeightInit::new(4)).unwrap();
        assert_eq!(dark.count_params().total, rev.count_params().total);
        assert_eq!(dark.count_params().total, csp_param_count(16));
        assert!(!dark.nodes().iter().any(|n| matches!(n.kind, NodeKind::RepBlock(_))));
        let rd = build_csp_block(CspKind::Dark, 16, true, ActivationKind::LeakyRelu, &mut WeightInit::new(4)).unwrap();
        let rr =
            build_csp_block(CspKind::Reversed, 16, true, ActivationKind::LeakyRelu, &mut WeightInit::new(4)).unwrap();
        let ident = |g: &GraphIR| {
            g.nodes().iter().find_map(|n| match &n.kind {
                NodeKind::RepBlock(r) => Some(r.has_identity()),
                _ => None,
            })
        };
        assert_eq!(ident(&rd), Some(false));
        assert_eq!(ident(&rr), Some(true));
        assert!(build_csp_block(CspKind::Dark, 7, false, ActivationKind::Silu, &mut WeightInit::new(0)).is_err());
    }
}
