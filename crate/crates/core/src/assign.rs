//! Lead-head-guided label assignment.
//!
//! Predictions are decoded per level as `center = (2 sigmoid(t) - 0.5 + cell) * stride`
//! and `size = (2 sigmoid(t))^2 * anchor`. A ground truth proposes candidate
//! cells on every level (3 cells in fine mode, 5 in coarse mode) for each
//! anchor passing the ratio gate, and dynamic-k matching picks positives by
//! `cost = -ln(class score) + w * -ln(IoU)`.
//!
//! Coarse-to-fine assignment matches the fine candidates for the lead head
//! and the coarse candidates for the auxiliary head, both against the lead
//! predictions. Auxiliary targets are the fine positives plus the coarse
//! positives landing on keys the fine run did not use, so they always
//! contain the lead targets. Coarse-only records carry an objectness upper
//! bound `u = max(0, 1 - r / r_c)` where `r` is the distance in cells from
//! the record's cell center to the object center.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphIR, NodeId, NodeKind, Port, AUX_HEAD_TAP};
use crate::tensor::{Shape, Tensor};

const LOG_EPS: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignerConfig {
    /// An anchor survives iff every side ratio against the object is below this.
    pub anchor_ratio: f64,
    pub iou_weight: f64,
    /// Number of best IoUs summed to obtain k.
    pub top_k: usize,
    /// Distance (in cells) at which the auxiliary objectness bound reaches 0.
    pub r_c: f64,
}

impl Default for AssignerConfig {
    fn default() -> Self {
        AssignerConfig { anchor_ratio: 4.0, iou_weight: 3.0, top_k: 10, r_c: 1.5 }
    }
}

impl AssignerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.anchor_ratio > 1.0) || !(self.iou_weight >= 0.0) || self.top_k == 0 || !(self.r_c > 0.0) {
            return Err(Error::Config(format!("invalid assigner settings {self:?}")));
        }
        Ok(())
    }
}

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { x1: cx - w / 2.0, y1: cy - h / 2.0, x2: cx + w / 2.0, y2: cy + h / 2.0 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn size(&self) -> (f64, f64) {
        (self.x2 - self.x1, self.y2 - self.y1)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

/// Object box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthBox {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite()) {
            return Err(Error::InvalidParams(format!("box size must be positive, got {} x {}", self.w, self.h)));
        }
        if !unit(self.cx) || !unit(self.cy) {
            return Err(Error::InvalidParams(format!("box center ({}, {}) outside the image", self.cx, self.cy)));
        }
        if self.class_id >= num_classes {
            return Err(Error::InvalidParams(format!(
                "class {} out of range for {num_classes} classes",
                self.class_id
            )));
        }
        Ok(())
    }

    pub fn to_pixels(&self, image: ImageSize) -> BBox {
        BBox::from_center(self.cx * image.width, self.cy * image.height, self.w * image.width, self.h * image.height)
    }
}

/// Raw head outputs of one pyramid level, laid out
/// `(anchors, grid_h, grid_w, 5 + num_classes)` with the last axis
/// `(tx, ty, tw, th, t_obj, class logits...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    pub stride: f64,
    pub anchors: Vec<(f64, f64)>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_classes: usize,
    pub raw: Vec<f64>,
}

impl PredictionGrid {
    pub fn new(
        stride: f64,
        anchors: Vec<(f64, f64)>,
        grid_h: usize,
        grid_w: usize,
        num_classes: usize,
        raw: Vec<f64>,
    ) -> Result<Self> {
        let g = PredictionGrid { stride, anchors, grid_h, grid_w, num_classes, raw };
        g.validate()?;
        Ok(g)
    }

    pub fn zeros(
        stride: f64,
        anchors: Vec<(f64, f64)>,
        grid_h: usize,
        grid_w: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let len = anchors.len() * grid_h * grid_w * (5 + num_classes);
        Self::new(stride, anchors, grid_h, grid_w, num_classes, vec![0.0; len])
    }

    /// Reads a `(anchors, grid_h, grid_w, 5 + num_classes)` tensor.
    pub fn from_tensor(stride: f64, anchors: Vec<(f64, f64)>, t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n != anchors.len() {
            return Err(Error::shape("prediction tensor", "anchors", anchors.len(), s.n));
        }
        if s.w < 5 {
            return Err(Error::shape("prediction tensor", "fields", 5, s.w));
        }
        let raw = t.data().iter().map(|&v| v as f64).collect();
        Self::new(stride, anchors, s.c, s.h, s.w - 5, raw)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let shape = Shape::new(self.anchors.len(), self.grid_h, self.grid_w, self.fields());
        Tensor::new(shape, self.raw.iter().map(|&v| v as f32).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stride > 0.0) || self.grid_h == 0 || self.grid_w == 0 || self.anchors.is_empty() {
            return Err(Error::InvalidParams("prediction grid needs stride > 0, grid >= 1 and anchors".into()));
        }
        if self.anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::InvalidParams("anchor sizes must be positive".into()));
        }
        let len = self.anchors.len() * self.grid_h * self.grid_w * self.fields();
        if self.raw.len() != len {
            return Err(Error::shape("prediction grid", "len", len, self.raw.len()));
        }
        Ok(())
    }

    pub fn fields(&self) -> usize {
        5 + self.num_classes
    }

    pub fn cell(&self, anchor: usize, gy: usize, gx: usize) -> &[f64] {
        let f = self.fields();
        let start = ((anchor * self.grid_h + gy) * self.grid_w + gx) * f;
        &self.raw[start..start + f]
    }

    pub fn cell_mut(&mut self, anchor: usize, gy: usize, gx: usize) -> &mut [f64] {
        let f = self.fields();
        let start = ((anchor * self.grid_h + gy) * self.grid_w + gx) * f;
        &mut self.raw[start..start + f]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPrediction {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
}

/// Decodes every `(anchor, gy, gx)` entry, in that index order.
pub fn decode_predictions(grid: &PredictionGrid) -> Vec<DecodedPrediction> {
    let mut out = Vec::with_capacity(grid.anchors.len() * grid.grid_h * grid.grid_w);
    for (a, &(aw, ah)) in grid.anchors.iter().enumerate() {
        for gy in 0..grid.grid_h {
            for gx in 0..grid.grid_w {
                let t = grid.cell(a, gy, gx);
                let cx = (2.0 * sigmoid(t[0]) - 0.5 + gx as f64) * grid.stride;
                let cy = (2.0 * sigmoid(t[1]) - 0.5 + gy as f64) * grid.stride;
                let w = (2.0 * sigmoid(t[2])).powi(2) * aw;
                let h = (2.0 * sigmoid(t[3])).powi(2) * ah;
                out.push(DecodedPrediction {
                    bbox: BBox::from_center(cx, cy, w, h),
                    objectness: sigmoid(t[4]),
                    class_scores: t[5..].iter().map(|&v| sigmoid(v)).collect(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateMode {
    Fine,
    Coarse,
}

/// Position of an object center on a level's grid: `(cell y, cell x, frac y, frac x)`.
fn grid_position(center: (f64, f64), stride: f64, grid_h: usize, grid_w: usize) -> (usize, usize, f64, f64) {
    let (px, py) = (center.0 / stride, center.1 / stride);
    let gx = (px.floor().max(0.0) as usize).min(grid_w - 1);
    let gy = (py.floor().max(0.0) as usize).min(grid_h - 1);
    (gy, gx, py - gy as f64, px - gx as f64)
}

/// Candidate cells `(gy, gx)` for an object centered at `center` (pixels).
/// Fine: the center cell, then its left or right neighbor (left when the
/// center lies in the left half, inclusive of the midline), then its upper
/// or lower neighbor (same rule). Coarse: the center cell, then left, right,
/// up, down. Cells outside the grid are dropped.
pub fn candidate_cells(
    center: (f64, f64),
    stride: f64,
    grid_h: usize,
    grid_w: usize,
    mode: CandidateMode,
) -> Vec<(usize, usize)> {
    let (gy, gx, fy, fx) = grid_position(center, stride, grid_h, grid_w);
    let (gy, gx) = (gy as isize, gx as isize);
    let offsets: Vec<(isize, isize)> = match mode {
        CandidateMode::Fine => vec![(0, 0), (0, if fx <= 0.5 { -1 } else { 1 }), (if fy <= 0.5 { -1 } else { 1 }, 0)],
        CandidateMode::Coarse => vec![(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)],
    };
    offsets
        .into_iter()
        .map(|(dy, dx)| (gy + dy, gx + dx))
        .filter(|&(y, x)| y >= 0 && x >= 0 && (y as usize) < grid_h && (x as usize) < grid_w)
        .map(|(y, x)| (y as usize, x as usize))
        .collect()
}

/// Indices of anchors whose every side ratio against `size` is below `limit`.
pub fn anchor_filter(size: (f64, f64), anchors: &[(f64, f64)], limit: f64) -> Vec<usize> {
    anchors
        .iter()
        .enumerate()
        .filter(|(_, &(aw, ah))| {
            let r = (size.0 / aw).max(aw / size.0).max(size.1 / ah).max(ah / size.1);
            r < limit
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidateKey {
    pub level: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub key: CandidateKey,
    pub bbox: BBox,
    pub class_scores: Vec<f64>,
}

/// A ground truth in pixel space as seen by the matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchTarget {
    pub class_id: usize,
    pub bbox: BBox,
}

pub fn match_cost(c: &Candidate, gt: &MatchTarget, iou_weight: f64) -> f64 {
    let cls = c.class_scores.get(gt.class_id).copied().unwrap_or(0.0);
    -(cls + LOG_EPS).ln() + iou_weight * -(iou(&c.bbox, &gt.bbox) + LOG_EPS).ln()
}

/// `clamp(floor(sum of the top_k IoUs), 1, n)`.
pub fn dynamic_k(ious: &[f64], top_k: usize) -> usize {
    let mut v = ious.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let s: f64 = v.iter().take(top_k).sum();
    (s.floor() as usize).clamp(1, ious.len().max(1))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matching {
    /// Per ground truth: the k lowest-cost eligible candidates before conflicts.
    pub selected: Vec<Vec<usize>>,
    /// Per candidate: owning ground truth after conflict resolution.
    pub owner: Vec<Option<usize>>,
    /// Ground truths left without any positive.
    pub unmatched: Vec<usize>,
}

/// Dynamic-k matching. `eligible[g]` lists the candidate indices ground
/// truth `g` may claim. Equal costs are resolved by lower candidate index
/// when selecting and by lower ground-truth index on conflicts.
pub fn dynamic_k_match(
    candidates: &[Candidate],
    gts: &[MatchTarget],
    eligible: &[Vec<usize>],
    cfg: &AssignerConfig,
) -> Result<Matching> {
    if eligible.len() != gts.len() {
        return Err(Error::shape("dynamic-k eligibility", "gts", gts.len(), eligible.len()));
    }
    if let Some(&bad) = eligible.iter().flatten().find(|&&i| i >= candidates.len()) {
        return Err(Error::InvalidParams(format!("eligible candidate {bad} out of range")));
    }
    let mut selected = Vec::with_capacity(gts.len());
    let mut best: Vec<Option<(f64, usize)>> = vec![None; candidates.len()];
    for (g, (gt, elig)) in gts.iter().zip(eligible).enumerate() {
        if elig.is_empty() {
            selected.push(Vec::new());
            continue;
        }
        let ious: Vec<f64> = elig.iter().map(|&c| iou(&candidates[c].bbox, &gt.bbox)).collect();
        let k = dynamic_k(&ious, cfg.top_k);
        let mut ranked: Vec<(f64, usize)> =
            elig.iter().map(|&c| (match_cost(&candidates[c], gt, cfg.iou_weight), c)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.dedup_by_key(|r| r.1);
        let picks: Vec<usize> = ranked.iter().take(k).map(|r| r.1).collect();
        for &(cost, c) in ranked.iter().take(k) {
            let better = match best[c] {
                None => true,
                Some((bc, _)) => cost.total_cmp(&bc) == Ordering::Less,
            };
            if better {
                best[c] = Some((cost, g));
            }
        }
        selected.push(picks);
    }
    let owner: Vec<Option<usize>> = best.iter().map(|b| b.map(|(_, g)| g)).collect();
    let owned: BTreeSet<usize> = owner.iter().flatten().copied().collect();
    let unmatched = (0..gts.len()).filter(|g| !owned.contains(g)).collect();
    Ok(Matching { selected, owner, unmatched })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Fine,
    CoarseOnly,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Fine => "fine",
            Provenance::CoarseOnly => "coarse-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub level: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub gt: usize,
    pub provenance: Provenance,
    /// Soft objectness target, the IoU of the decoded prediction with the object.
    pub objectness: f64,
    pub class_id: usize,
    /// Object box `(cx, cy, w, h)` in pixels.
    pub box_target: [f64; 4],
    /// Distance in cells from this cell's center to the object center.
    pub distance: f64,
    pub upper_bound: f64,
}

impl AssignmentRecord {
    pub fn key(&self) -> CandidateKey {
        CandidateKey { level: self.level, anchor: self.anchor, gy: self.gy, gx: self.gx }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// Records ordered by `(level, anchor, gy, gx)`.
    pub records: Vec<AssignmentRecord>,
    pub unmatched: Vec<usize>,
}

impl AssignmentResult {
    pub fn level(&self, level: usize) -> impl Iterator<Item = &AssignmentRecord> {
        self.records.iter().filter(move |r| r.level == level)
    }

    pub fn keys(&self) -> BTreeSet<CandidateKey> {
        self.records.iter().map(|r| r.key()).collect()
    }

    /// Highest objectness target per cell over anchors, `grid[gy][gx]`.
    pub fn objectness_grid(&self, level: usize, grid_h: usize, grid_w: usize) -> Vec<Vec<f64>> {
        let mut grid = vec![vec![0.0; grid_w]; grid_h];
        for r in self.level(level) {
            if r.gy < grid_h && r.gx < grid_w {
                grid[r.gy][r.gx] = f64::max(grid[r.gy][r.gx], r.objectness);
            }
        }
        grid
    }
}

pub fn bound(distance: f64, r_c: f64) -> f64 {
    (1.0 - distance / r_c).max(0.0)
}

fn check_inputs(
    grids: &[PredictionGrid],
    gts: &[GroundTruthBox],
    image: ImageSize,
    cfg: &AssignerConfig,
) -> Result<()> {
    cfg.validate()?;
    if !(image.width > 0.0 && image.height > 0.0) {
        return Err(Error::InvalidParams("image size must be positive".into()));
    }
    for g in grids {
        g.validate()?;
    }
    let nc = grids.first().map_or(usize::MAX, |g| g.num_classes);
    if grids.iter().any(|g| g.num_classes != nc) {
        return Err(Error::InvalidParams("all levels must predict the same classes".into()));
    }
    for gt in gts {
        gt.validate(nc)?;
    }
    Ok(())
}

/// One dynamic-k run over all levels with the given candidate mode.
fn assign_mode(
    grids: &[PredictionGrid],
    gts: &[GroundTruthBox],
    image: ImageSize,
    mode: CandidateMode,
    cfg: &AssignerConfig,
) -> Result<AssignmentResult> {
    check_inputs(grids, gts, image, cfg)?;
    let targets: Vec<MatchTarget> =
        gts.iter().map(|g| MatchTarget { class_id: g.class_id, bbox: g.to_pixels(image) }).collect();
    let mut wanted: Vec<BTreeSet<CandidateKey>> = Vec::with_capacity(gts.len());
    for t in &targets {
        let mut keys = BTreeSet::new();
        for (level, grid) in grids.iter().enumerate() {
            let anchors = anchor_filter(t.bbox.size(), &grid.anchors, cfg.anchor_ratio);
            for (gy, gx) in candidate_cells(t.bbox.center(), grid.stride, grid.grid_h, grid.grid_w, mode) {
                keys.extend(anchors.iter().map(|&anchor| CandidateKey { level, anchor, gy, gx }));
            }
        }
        wanted.push(keys);
    }
    let pool: Vec<CandidateKey> = wanted.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<CandidateKey, usize> = pool.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let decoded: Vec<Vec<DecodedPrediction>> = grids.iter().map(decode_predictions).collect();
    let candidates: Vec<Candidate> = pool
        .iter()
        .map(|&key| {
            let g = &grids[key.level];
            let d = &decoded[key.level][(key.anchor * g.grid_h + key.gy) * g.grid_w + key.gx];
            Candidate { key, bbox: d.bbox, class_scores: d.class_scores.clone() }
        })
        .collect();
    let eligible: Vec<Vec<usize>> = wanted.iter().map(|ks| ks.iter().map(|k| index[k]).collect()).collect();
    let m = dynamic_k_match(&candidates, &targets, &eligible, cfg)?;
    let records = candidates
        .iter()
        .zip(&m.owner)
        .filter_map(|(c, o)| o.map(|g| (c, g)))
        .map(|(c, g)| {
            let t = &targets[g];
            let stride = grids[c.key.level].stride;
            let (cx, cy) = t.bbox.center();
            let (w, h) = t.bbox.size();
            let distance = (cx / stride - (c.key.gx as f64 + 0.5)).hypot(cy / stride - (c.key.gy as f64 + 0.5));
            AssignmentRecord {
                level: c.key.level,
                anchor: c.key.anchor,
                gy: c.key.gy,
                gx: c.key.gx,
                gt: g,
                provenance: Provenance::Fine,
                objectness: iou(&c.bbox, &t.bbox),
                class_id: t.class_id,
                box_target: [cx, cy, w, h],
                distance,
                upper_bound: 1.0,
            }
        })
        .collect();
    Ok(AssignmentResult { records, unmatched: m.unmatched })
}

/// Fine assignment of one head against its own predictions.
pub fn assign_fine(
    grids: &[PredictionGrid],
    gts: &[GroundTruthBox],
    image: ImageSize,
    cfg: &AssignerConfig,
) -> Result<AssignmentResult> {
    assign_mode(grids, gts, image, CandidateMode::Fine, cfg)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoarseToFine {
    pub lead: AssignmentResult,
    pub aux: AssignmentResult,
}

/// Lead (fine) and auxiliary (coarse) targets, both guided by the lead
/// predictions only.
pub fn assign_coarse_to_fine(
    lead: &[PredictionGrid],
    gts: &[GroundTruthBox],
    image: ImageSize,
    cfg: &AssignerConfig,
) -> Result<CoarseToFine> {
    let fine = assign_mode(lead, gts, image, CandidateMode::Fine, cfg)?;
    let coarse = assign_mode(lead, gts, image, CandidateMode::Coarse, cfg)?;
    let fine_keys = fine.keys();
    let mut records: Vec<AssignmentRecord> = fine.records.clone();
    records.extend(coarse.records.into_iter().filter(|r| !fine_keys.contains(&r.key())).map(|mut r| {
        r.provenance = Provenance::CoarseOnly;
        r.upper_bound = bound(r.distance, cfg.r_c);
        r
    }));
    records.sort_by_key(|r| r.key());
    let covered: BTreeSet<usize> = records.iter().map(|r| r.gt).collect();
    let unmatched = (0..gts.len()).filter(|g| !covered.contains(g)).collect();
    Ok(CoarseToFine { lead: fine, aux: AssignmentResult { records, unmatched } })
}

/// Each head assigned against its own predictions with fine candidates.
pub fn assign_independent(
    lead: &[PredictionGrid],
    aux: &[PredictionGrid],
    gts: &[GroundTruthBox],
    image: ImageSize,
    cfg: &AssignerConfig,
) -> Result<(AssignmentResult, AssignmentResult)> {
    Ok((assign_fine(lead, gts, image, cfg)?, assign_fine(aux, gts, image, cfg)?))
}

/// Clamps coarse-only objectness targets to `u = max(0, 1 - r / r_c)`.
pub fn apply_objectness_bound(aux: &AssignmentResult, r_c: f64) -> Result<AssignmentResult> {
    if !(r_c > 0.0) {
        return Err(Error::InvalidParams(format!("r_c must be positive, got {r_c}")));
    }
    let mut out = aux.clone();
    for r in &mut out.records {
        if r.provenance == Provenance::CoarseOnly {
            r.upper_bound = bound(r.distance, r_c);
            r.objectness = r.objectness.min(r.upper_bound);
        }
    }
    Ok(out)
}

/// `Split` nodes whose every output port feeds the same `Add`.
pub fn merge_splits(graph: &GraphIR) -> Vec<NodeId> {
    graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Split { .. }))
        .filter(|n| {
            let ways = n.kind.output_ports();
            let feeds: Vec<_> = graph.edges().iter().filter(|e| e.src == n.id).collect();
            let dst = feeds.first().map(|e| e.dst);
            feeds.len() == ways
                && feeds.iter().all(|e| Some(e.dst) == dst)
                && (0..ways).all(|p| feeds.iter().any(|e| e.port == p))
                && dst.is_some_and(|d| matches!(graph.node(d).map(|x| &x.kind), Some(NodeKind::Add)))
        })
        .map(|n| n.id)
        .collect()
}

pub fn aux_tap_name(level: usize) -> String {
    format!("aux_tap{level}")
}

/// Adds an output reading the first pre-merge group of the `level`-th
/// merge, so the auxiliary head sees one group rather than the merged sum.
pub fn partial_aux_tap(graph: &GraphIR, level: usize) -> Result<GraphIR> {
    let splits = merge_splits(graph);
    let split = *splits.get(level).ok_or_else(|| {
        Error::Invalid(format!("no merge-cardinality split at level {level} ({} present)", splits.len()))
    })?;
    let name = aux_tap_name(level);
    if graph.output_decls().iter().any(|(n, _)| *n == name) {
        return Err(Error::Invalid(format!("output {name:?} already exists")));
    }
    let port = Port { node: split, port: 0 };
    let channels = graph.port_channels()?.get(&port).copied().unwrap_or(0);
    let (g, _) = graph.with_node(NodeKind::Output { name, channels }, AUX_HEAD_TAP, &[port]);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    const IMAGE: ImageSize = ImageSize { width: 64.0, height: 64.0 };

    fn cand(i: usize, bbox: BBox, score: f64) -> Candidate {
        Candidate { key: CandidateKey { level: 0, anchor: 0, gy: 0, gx: i }, bbox, class_scores: vec![score] }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::from_corners(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &BBox::from_corners(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn decode_zero_outputs() {
        let g = PredictionGrid::zeros(8.0, vec![(10.0, 20.0)], 4, 4, 2).unwrap();
        let d = decode_predictions(&g);
        let p = &d[1 * 4 + 2];
        assert_eq!(p.bbox.center(), (2.5 * 8.0, 1.5 * 8.0));
        assert_eq!(p.bbox.size(), (10.0, 20.0));
        assert_eq!(p.objectness, 0.5);
        assert_eq!(p.class_scores, vec![0.5, 0.5]);
    }

    #[test]
    fn decode_size_cap() {
        let mut g = PredictionGrid::zeros(8.0, vec![(10.0, 10.0)], 1, 1, 1).unwrap();
        g.cell_mut(0, 0, 0)[2] = 40.0;
        g.cell_mut(0, 0, 0)[3] = 40.0;
        let (w, h) = decode_predictions(&g)[0].bbox.size();
        assert!((w - 40.0).abs() < 1e-9 && (h - 40.0).abs() < 1e-9);
    }

    #[test]
    fn candidate_cell_examples() {
        let c = (5.3, 2.7);
        assert_eq!(candidate_cells(c, 1.0, 10, 10, CandidateMode::Fine), vec![(2, 5), (2, 4), (3, 5)]);
        assert_eq!(
            candidate_cells(c, 1.0, 10, 10, CandidateMode::Coarse),
            vec![(2, 5), (2, 4), (2, 6), (1, 5), (3, 5)]
        );
        assert_eq!(candidate_cells((5.5, 2.5), 1.0, 10, 10, CandidateMode::Fine), vec![(2, 5), (2, 4), (1, 5)]);
        assert_eq!(candidate_cells((0.2, 0.2), 1.0, 4, 4, CandidateMode::Fine), vec![(0, 0)]);
        assert_eq!(candidate_cells((4.0, 4.0), 1.0, 4, 4, CandidateMode::Coarse), vec![(3, 3), (3, 2), (2, 3)]);
    }

    #[test]
    fn anchor_gate() {
        let anchors = [(10.0, 10.0), (50.0, 10.0), (40.0, 10.0), (39.0, 10.0)];
        assert_eq!(anchor_filter((10.0, 10.0), &anchors, 4.0), vec![0, 3]);
    }

    #[test]
    fn dynamic_k_single_candidate() {
        let gt = MatchTarget { class_id: 0, bbox: BBox::from_corners(0.0, 0.0, 1.0, 1.0) };
        let c = cand(0, BBox::from_corners(10.0, 10.0, 11.0, 11.0), 0.01);
        let m = dynamic_k_match(&[c], &[gt], &[vec![0]], &AssignerConfig::default()).unwrap();
        assert_eq!(m.owner, vec![Some(0)]);
        assert!(m.unmatched.is_empty());
    }

    #[test]
    fn conflict_goes_to_cheaper_gt() {
        let b = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let gts = [MatchTarget { class_id: 0, bbox: b }, MatchTarget { class_id: 1, bbox: b }];
        let c = Candidate {
            key: CandidateKey { level: 0, anchor: 0, gy: 0, gx: 0 },
            bbox: b,
            class_scores: vec![(-0.5f64).exp(), (-0.2f64).exp()],
        };
        let cfg = AssignerConfig::default();
        assert!((match_cost(&c, &gts[0], cfg.iou_weight) - 0.5).abs() < 1e-6);
        let m = dynamic_k_match(&[c], &gts, &[vec![0], vec![0]], &cfg).unwrap();
        assert_eq!(m.owner, vec![Some(1)]);
        assert_eq!(m.unmatched, vec![0]);
    }

    #[test]
    fn tie_goes_to_lower_gt() {
        let b = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let gts = [MatchTarget { class_id: 0, bbox: b }; 2];
        let m = dynamic_k_match(&[cand(0, b, 0.9)], &gts, &[vec![0], vec![0]], &AssignerConfig::default()).unwrap();
        assert_eq!(m.owner, vec![Some(0)]);
    }

    #[test]
    fn gt_without_candidates_is_unmatched() {
        let b = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let gts = [MatchTarget { class_id: 0, bbox: b }];
        let m = dynamic_k_match(&[], &gts, &[vec![]], &AssignerConfig::default()).unwrap();
        assert_eq!(m.unmatched, vec![0]);
    }

    #[test]
    fn dynamic_k_rule() {
        assert_eq!(dynamic_k(&[0.1, 0.2], 10), 1);
        assert_eq!(dynamic_k(&[0.9, 0.8, 0.7, 0.1], 10), 2);
        assert_eq!(dynamic_k(&[1.0; 12], 10), 10);
        assert_eq!(dynamic_k(&[1.0; 3], 10), 3);
    }

    fn level(grid: usize, stride: f64) -> PredictionGrid {
        PredictionGrid::zeros(stride, vec![(8.0, 8.0), (16.0, 16.0), (32.0, 32.0)], grid, grid, 2).unwrap()
    }

    #[test]
    fn zero_gts_give_empty_targets() {
        let r = assign_coarse_to_fine(&[level(8, 8.0)], &[], IMAGE, &AssignerConfig::default()).unwrap();
        assert!(r.lead.records.is_empty() && r.aux.records.is_empty());
        let (a, b) =
            assign_independent(&[level(8, 8.0)], &[level(8, 8.0)], &[], IMAGE, &AssignerConfig::default()).unwrap();
        assert!(a.records.is_empty() && b.records.is_empty());
    }

    #[test]
    fn centered_gt_superset() {
        let gt = GroundTruthBox { class_id: 1, cx: 0.5, cy: 0.5, w: 0.25, h: 0.25 };
        let r = assign_coarse_to_fine(&[level(8, 8.0)], &[gt], IMAGE, &AssignerConfig::default()).unwrap();
        assert!(!r.lead.records.is_empty());
        assert!(r.lead.keys().is_subset(&r.aux.keys()));
        for rec in &r.aux.records {
            match rec.provenance {
                Provenance::Fine => assert_eq!(rec.upper_bound, 1.0),
                Provenance::CoarseOnly => assert!(rec.upper_bound < 1.0),
            }
        }
    }

    #[test]
    fn bound_scan() {
        let us: Vec<f64> = [0.0, 0.5, 1.0, 1.5].iter().map(|&r| bound(r, 1.5)).collect();
        assert_eq!(us[0], 1.0);
        assert_eq!(us[3], 0.0);
        assert!(us.windows(2).all(|w| w[1] <= w[0]));
        assert!(apply_objectness_bound(&AssignmentResult::default(), 0.0).is_err());
    }

    #[test]
    fn rejects_bad_gt() {
        let bad = GroundTruthBox { class_id: 5, cx: 0.5, cy: 0.5, w: 0.1, h: 0.1 };
        assert!(assign_fine(&[level(8, 8.0)], &[bad], IMAGE, &AssignerConfig::default()).is_err());
        let bad = GroundTruthBox { class_id: 0, cx: 1.5, cy: 0.5, w: 0.1, h: 0.1 };
        assert!(assign_fine(&[level(8, 8.0)], &[bad], IMAGE, &AssignerConfig::default()).is_err());
    }
}
