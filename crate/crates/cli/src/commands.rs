use std::path::Path;

use serde::Serialize;

use rpk_core::config::ModelConfigFile;
use rpk_core::graph::GraphIR;
use rpk_core::graph_io::{load_graph, save_graph};
use rpk_core::init::WeightInit;
use rpk_core::reparam::{apply_reparam, fold_batchnorm_nodes, plan_reparam, PlannedPlacement, RewriteMode};
use rpk_core::scaling::{
    compound_scale, naive_scale, scaling_report, CompoundOptions, ScalableConfig, ScaleMode, ScalingPlan,
    ScalingReport, TransitionRule, CANONICAL_BASE,
};
use rpk_core::tensor::Shape;

use crate::error::{domain, input, CliError, CliResult};
use crate::table::render;
use crate::{BuildArgs, CheckEquivArgs, CountArgs, FuseArgs, GraphPaths, ModeArg, PlanArgs, ScaleArgs, TransitionArg};

pub const FUSE_TOLERANCE: f64 = 1e-4;
const FUSE_INPUTS: u64 = 8;

pub fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| input(format!("{}: {e}", path.display())))
}

pub fn to_toml(value: &impl Serialize) -> CliResult<String> {
    toml::to_string(value).map_err(domain)
}

fn read_config(path: &Path) -> CliResult<ModelConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    ModelConfigFile::parse(&text).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn load(graph: &Path, weights: &Path) -> CliResult<GraphIR> {
    let g = load_graph(graph, weights).map_err(input)?;
    let report = g.validate();
    if !report.is_empty() {
        return Err(input(format!("{}: {report}", graph.display())));
    }
    Ok(g)
}

fn load_paths(p: &GraphPaths) -> CliResult<GraphIR> {
    load(&p.graph, &p.weights)
}

pub fn build(a: &BuildArgs) -> CliResult {
    let cfg = read_config(&a.config)?;
    let g = cfg.build().map_err(domain)?;
    save_graph(&g, &a.graph, &a.weights).map_err(input)?;
    println!(
        "built {} nodes, {} parameters -> {}, {}",
        g.nodes().len(),
        g.count_params().total,
        a.graph.display(),
        a.weights.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PlanFile<'a> {
    placements: Vec<PlanRow<'a>>,
}

#[derive(Serialize)]
struct PlanRow<'a> {
    node: usize,
    kind: &'a str,
    annotation: &'a str,
    verdict: String,
    rule: String,
}

pub fn plan(a: &PlanArgs) -> CliResult {
    let g = load_paths(&a.input)?;
    let placements = plan_reparam(&g);
    let rows: Vec<PlanRow> = placements
        .iter()
        .map(|p| {
            let n = g.node(p.node).expect("planned node exists");
            PlanRow {
                node: p.node.0,
                kind: n.kind.type_name(),
                annotation: &n.annotation,
                verdict: p.verdict.to_string(),
                rule: p.rule.to_string(),
            }
        })
        .collect();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![format!("n{}", r.node), r.kind.into(), r.annotation.into(), r.verdict.clone(), r.rule.clone()])
        .collect();
    print!("{}", render(&["node", "kind", "annotation", "verdict", "rule"], &cells));
    if let Some(out) = &a.out {
        write_text(out, &to_toml(&PlanFile { placements: rows })?)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Deviation {
    pub max_abs: f64,
    pub max_rel: f64,
}

/// Evaluates both graphs on `count` seeded random inputs and returns the
/// largest absolute deviation and that deviation relative to the largest
/// reference magnitude.
pub fn compare(reference: &GraphIR, candidate: &GraphIR, count: u64, seed: u64, size: usize) -> CliResult<Deviation> {
    let decls = reference.input_decls();
    if candidate.input_decls() != decls {
        return Err(domain("graphs declare different inputs"));
    }
    let outs: Vec<String> = reference.output_decls().into_iter().map(|(n, _)| n).collect();
    let cand_outs: Vec<String> = candidate.output_decls().into_iter().map(|(n, _)| n).collect();
    if outs != cand_outs {
        return Err(domain("graphs declare different outputs"));
    }
    let (mut max_abs, mut max_ref) = (0.0f64, 0.0f64);
    for i in 0..count {
        let mut init = WeightInit::new(seed.wrapping_add(i));
        let mut inputs = std::collections::BTreeMap::new();
        for (name, c) in &decls {
            inputs.insert(name.clone(), init.tensor(Shape::new(1, *c, size, size), 1.0).map_err(domain)?);
        }
        let ra = reference.eval(&inputs).map_err(domain)?;
        let rb = candidate.eval(&inputs).map_err(domain)?;
        for name in &outs {
            max_abs = max_abs.max(ra[name].max_abs_diff(&rb[name]).map_err(domain)?);
            max_ref = max_ref.max(ra[name].max_abs());
        }
    }
    let max_rel = if max_abs == 0.0 { 0.0 } else { max_abs / max_ref };
    Ok(Deviation { max_abs, max_rel })
}

#[derive(Serialize)]
struct FuseReport {
    inputs: u64,
    seed: u64,
    size: usize,
    tolerance: f64,
    max_abs: f64,
    max_rel: f64,
    nodes_before: usize,
    nodes_after: usize,
    node_delta: i64,
    primitive_nodes_before: usize,
    primitive_nodes_after: usize,
    params_before: u64,
    params_after: u64,
    param_delta: i64,
    fused_nodes: Vec<usize>,
    bn_folded: bool,
}

pub fn fuse(a: &FuseArgs) -> CliResult {
    if a.size == 0 {
        return Err(domain("input size must be positive"));
    }
    let g = load_paths(&a.input)?;
    let placements: Vec<PlannedPlacement> = plan_reparam(&g)
        .into_iter()
        .filter(|p| matches!(g.node(p.node).map(|n| &n.kind), Some(rpk_core::graph::NodeKind::RepBlock(_))))
        .collect();
    let mut fused = apply_reparam(&g, &placements, RewriteMode::Fuse).map_err(domain)?;
    if a.fold_bn {
        fused = fold_batchnorm_nodes(&fused).map_err(domain)?;
    }
    let dev = compare(&g, &fused, FUSE_INPUTS, a.seed, a.size)?;
    let (pb, pa) = (g.count_params().total, fused.count_params().total);
    let report = FuseReport {
        inputs: FUSE_INPUTS,
        seed: a.seed,
        size: a.size,
        tolerance: FUSE_TOLERANCE,
        max_abs: dev.max_abs,
        max_rel: dev.max_rel,
        nodes_before: g.nodes().len(),
        nodes_after: fused.nodes().len(),
        node_delta: fused.nodes().len() as i64 - g.nodes().len() as i64,
        primitive_nodes_before: g.primitive_node_count(),
        primitive_nodes_after: fused.primitive_node_count(),
        params_before: pb,
        params_after: pa,
        param_delta: pa as i64 - pb as i64,
        fused_nodes: placements.iter().map(|p| p.node.0).collect(),
        bn_folded: a.fold_bn,
    };
    let rows = vec![
        vec![
            "nodes".into(),
            report.nodes_before.to_string(),
            report.nodes_after.to_string(),
            format!("{:+}", report.node_delta),
        ],
        vec![
            "primitive nodes".into(),
            report.primitive_nodes_before.to_string(),
            report.primitive_nodes_after.to_string(),
            format!("{:+}", report.primitive_nodes_after as i64 - report.primitive_nodes_before as i64),
        ],
        vec!["params".into(), pb.to_string(), pa.to_string(), format!("{:+}", report.param_delta)],
    ];
    print!("{}", render(&["", "before", "after", "delta"], &rows));
    println!("fused rep blocks: {}", placements.len());
    println!(
        "max abs deviation: {:.3e}  max rel deviation: {:.3e}  ({} inputs, tolerance {:.0e})",
        dev.max_abs, dev.max_rel, FUSE_INPUTS, FUSE_TOLERANCE
    );
    save_graph(&fused, &a.out_graph, &a.out_weights).map_err(input)?;
    if let Some(path) = &a.report {
        write_text(path, &to_toml(&report)?)?;
    }
    if !(dev.max_abs <= FUSE_TOLERANCE) {
        return Err(CliError::Verification(format!(
            "max abs deviation {:.3e} exceeds {FUSE_TOLERANCE:.0e}",
            dev.max_abs
        )));
    }
    Ok(())
}

pub fn check_equiv(a: &CheckEquivArgs) -> CliResult {
    if a.size == 0 || a.inputs == 0 {
        return Err(domain("input size and count must be positive"));
    }
    let ga = load(&a.graph_a, &a.weights_a)?;
    let gb = load(&a.graph_b, &a.weights_b)?;
    let dev = compare(&ga, &gb, a.inputs, a.seed, a.size)?;
    println!("max abs deviation: {:.3e}  max rel deviation: {:.3e}  ({} inputs)", dev.max_abs, dev.max_rel, a.inputs);
    if !(dev.max_abs <= a.tolerance) {
        return Err(CliError::Verification(format!(
            "max abs deviation {:.3e} exceeds {:.0e}",
            dev.max_abs, a.tolerance
        )));
    }
    println!("equivalent within {:.0e}", a.tolerance);
    Ok(())
}

#[derive(Serialize)]
struct CountFile {
    input_size: usize,
    total_params: u64,
    total_macs: u64,
    total_flops: u64,
    nodes: Vec<CountRow>,
}

#[derive(Serialize)]
struct CountRow {
    node: usize,
    kind: String,
    annotation: String,
    params: u64,
    macs: u64,
}

pub fn count(a: &CountArgs) -> CliResult {
    let g = match (&a.config, &a.graph, &a.weights) {
        (Some(c), _, _) => read_config(c)?.build().map_err(domain)?,
        (None, Some(g), Some(w)) => load(g, w)?,
        _ => return Err(input("pass --config or --graph with --weights")),
    };
    if a.size == 0 {
        return Err(domain("input size must be positive"));
    }
    let params = g.count_params();
    let macs = g.count_macs(a.size, a.size).map_err(domain)?;
    let rows: Vec<CountRow> = g
        .nodes()
        .iter()
        .zip(params.per_node.iter().zip(&macs.per_node))
        .map(|(n, ((_, p), (_, m)))| CountRow {
            node: n.id.0,
            kind: n.kind.type_name().into(),
            annotation: n.annotation.clone(),
            params: *p,
            macs: *m,
        })
        .collect();
    let mut cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![format!("n{}", r.node), r.kind.clone(), r.annotation.clone(), r.params.to_string(), r.macs.to_string()]
        })
        .collect();
    cells.push(vec![
        "total".into(),
        String::new(),
        String::new(),
        params.total.to_string(),
        macs.total_macs.to_string(),
    ]);
    print!("{}", render(&["node", "kind", "annotation", "params", "MACs"], &cells));
    println!("FLOPs (2 x MACs) at {0}x{0}: {1}", a.size, macs.total_flops());
    if let Some(out) = &a.out {
        let file = CountFile {
            input_size: a.size,
            total_params: params.total,
            total_macs: macs.total_macs,
            total_flops: macs.total_flops(),
            nodes: rows,
        };
        write_text(out, &to_toml(&file)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ScaleFile {
    plan: ScalingPlan,
    report: ScalingReport,
}

pub fn scale(a: &ScaleArgs) -> CliResult {
    let base: ScalableConfig = match &a.config {
        Some(path) => {
            let cfg = read_config(path)?;
            match (cfg.block.elan(), cfg.block.eelan()) {
                (Some(e), _) => e.into(),
                (_, Some(e)) => e.into(),
                _ => return Err(domain("scaling needs an elan or eelan block")),
            }
        }
        None => CANONICAL_BASE.into(),
    };
    let (scaled, plan) = match a.mode {
        ModeArg::Compound => {
            let opts = CompoundOptions {
                branch_width: a.branch_width,
                transition: match a.transition {
                    TransitionArg::Explicit => TransitionRule::Explicit,
                    TransitionArg::Induced => TransitionRule::Induced,
                },
            };
            compound_scale(&base, a.depth, a.width, &opts)
        }
        ModeArg::WidthOnly => naive_scale(&base, ScaleMode::WidthOnly, a.width),
        ModeArg::DepthOnly => naive_scale(&base, ScaleMode::DepthOnly, a.depth),
    }
    .map_err(domain)?;
    if a.size == 0 {
        return Err(domain("input size must be positive"));
    }
    let report = scaling_report(&base, &scaled, a.size).map_err(domain)?;
    println!(
        "mode {}  depth x{}  width x{}  transition {}",
        plan.mode, plan.depth_factor, plan.width_factor, plan.transition_rule
    );
    print!("{report}");
    println!("induced width factor (concat): {:.4}", plan.induced_width_factor);
    for (i, t) in plan.drift.transitions.iter().enumerate() {
        println!(
            "transition {i}: in {} -> {}, out {} -> {}, out/in {:.4} -> {:.4}, ratio-preserving out {:.2}: {}",
            t.in_before,
            t.in_after,
            t.out_before,
            t.out_after,
            t.ratio_before,
            t.ratio_after,
            t.ratio_preserving_out,
            if t.flagged { "DRIFT" } else { "ok" }
        );
    }
    if let Some(out) = &a.out {
        write_text(out, &to_toml(&ScaleFile { plan, report })?)?;
    }
    Ok(())
}
