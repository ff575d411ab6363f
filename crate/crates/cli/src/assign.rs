//! `assign` subcommand: scenario file in, targets and objectness grids out.
//!
//! ```toml
//! image_size = [64, 64]        # width, height in pixels
//! num_classes = 2
//! seed = 1                     # for levels without prediction files
//! mode = "coarse-to-fine"      # or "independent"
//!
//! [assigner]                   # optional overrides
//! r_c = 1.5
//!
//! [[levels]]
//! stride = 8
//! anchors = [[12, 16], [19, 36]]
//! predictions = "lead0.rpkt"   # optional, (anchors, grid_h, grid_w, 5 + classes)
//! aux_predictions = "aux0.rpkt"
//!
//! [[gts]]
//! class_id = 0
//! cx = 0.5
//! cy = 0.5
//! w = 0.25
//! h = 0.25
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rpk_core::assign::{
    apply_objectness_bound, assign_coarse_to_fine, assign_independent, AssignerConfig, AssignmentResult,
    GroundTruthBox, ImageSize, PredictionGrid,
};
use rpk_core::formats::read_tensor;
use rpk_core::init::WeightInit;
use rpk_core::tensor::Shape;

use crate::commands::{to_toml, write_text};
use crate::error::{domain, input, CliResult};
use crate::AssignArgs;

const RANDOM_RANGE: f32 = 2.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    #[default]
    CoarseToFine,
    Independent,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Scenario {
    image_size: [f64; 2],
    num_classes: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    mode: Mode,
    #[serde(default)]
    assigner: AssignerConfig,
    levels: Vec<LevelSpec>,
    #[serde(default)]
    gts: Vec<GroundTruthBox>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelSpec {
    stride: f64,
    anchors: Vec<[f64; 2]>,
    predictions: Option<PathBuf>,
    aux_predictions: Option<PathBuf>,
}

#[derive(Serialize)]
struct TargetsFile {
    mode: Mode,
    lead: AssignmentResult,
    aux: AssignmentResult,
}

fn grid_for(
    level: &LevelSpec,
    file: Option<&PathBuf>,
    base: &Path,
    image: ImageSize,
    classes: usize,
    init: &mut WeightInit,
) -> CliResult<PredictionGrid> {
    let anchors: Vec<(f64, f64)> = level.anchors.iter().map(|a| (a[0], a[1])).collect();
    if !(level.stride > 0.0) || anchors.is_empty() {
        return Err(domain("each level needs a positive stride and at least one anchor"));
    }
    let gh = (image.height / level.stride).ceil() as usize;
    let gw = (image.width / level.stride).ceil() as usize;
    let shape = Shape::new(anchors.len(), gh.max(1), gw.max(1), 5 + classes);
    // Drawn unconditionally so a level's random values do not depend on which files exist.
    let random = init.tensor(shape, RANDOM_RANGE).map_err(domain)?;
    let t = match file {
        Some(p) => {
            let path = base.join(p);
            let t = read_tensor(&path).map_err(input)?;
            if t.shape() != shape {
                return Err(input(format!("{}: expected shape {shape}, found {}", path.display(), t.shape())));
            }
            t
        }
        None => random,
    };
    PredictionGrid::from_tensor(level.stride, anchors, &t).map_err(domain)
}

fn dump_grid(result: &AssignmentResult, level: usize, grid: &PredictionGrid, head: &str) -> String {
    let mut out = format!(
        "# level {level} {head} stride {} grid {}x{}: highest objectness target per cell\n",
        grid.stride, grid.grid_h, grid.grid_w
    );
    for row in result.objectness_grid(level, grid.grid_h, grid.grid_w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn run(a: &AssignArgs) -> CliResult {
    let text = std::fs::read_to_string(&a.scenario).map_err(|e| input(format!("{}: {e}", a.scenario.display())))?;
    let sc: Scenario = toml::from_str(&text).map_err(|e| input(format!("{}: {e}", a.scenario.display())))?;
    let image = ImageSize { width: sc.image_size[0], height: sc.image_size[1] };
    if !(image.width > 0.0 && image.height > 0.0) || sc.levels.is_empty() {
        return Err(domain("scenario needs a positive image size and at least one level"));
    }
    let base = a.scenario.parent().unwrap_or(Path::new("."));
    let mut init = WeightInit::new(sc.seed);
    let mut lead = Vec::new();
    let mut aux = Vec::new();
    for level in &sc.levels {
        lead.push(grid_for(level, level.predictions.as_ref(), base, image, sc.num_classes, &mut init)?);
        aux.push(grid_for(level, level.aux_predictions.as_ref(), base, image, sc.num_classes, &mut init)?);
    }
    let (lead_t, aux_t) = match sc.mode {
        Mode::CoarseToFine => {
            let r = assign_coarse_to_fine(&lead, &sc.gts, image, &sc.assigner).map_err(domain)?;
            let bounded = apply_objectness_bound(&r.aux, sc.assigner.r_c).map_err(domain)?;
            (r.lead, bounded)
        }
        Mode::Independent => assign_independent(&lead, &aux, &sc.gts, image, &sc.assigner).map_err(domain)?,
    };
    println!(
        "{} ground truths, {} lead positives, {} aux positives, unmatched {:?}",
        sc.gts.len(),
        lead_t.records.len(),
        aux_t.records.len(),
        lead_t.unmatched
    );
    let stem = a.out.with_extension("");
    for (i, g) in lead.iter().enumerate() {
        for (head, result) in [("lead", &lead_t), ("aux", &aux_t)] {
            let path = PathBuf::from(format!("{}.level{i}.{head}.txt", stem.display()));
            write_text(&path, &dump_grid(result, i, g, head))?;
        }
    }
    write_text(&a.out, &to_toml(&TargetsFile { mode: sc.mode, lead: lead_t, aux: aux_t })?)
}
