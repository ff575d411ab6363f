//! Depth / width scaling of concatenation-based blocks.
//!
//! Depth scales the number of computational units, `d' = max(1, round(a d))`.
//! Channel counts scale to the nearest multiple of 8 (at least 8). A factor
//! of exactly 1 leaves the corresponding quantity untouched.
//!
//! Deepening an ELAN widens its concatenation, so a transition whose output
//! width is not adjusted sees its in/out ratio drift. The compound rule
//! scales depth and then widens the transition; [`TransitionRule::Induced`]
//! uses exactly the widening induced by the new concat width, while
//! [`TransitionRule::Explicit`] applies the user's width factor and reports
//! the induced one next to it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blocks::{build_eelan, build_elan, EelanConfig, ElanConfig};
use crate::error::{Error, Result};
use crate::graph::GraphIR;
use crate::init::WeightInit;

pub const CHANNEL_GRANULE: usize = 8;

/// Base configuration used for comparing scaling strategies.
pub const CANONICAL_BASE: ElanConfig = ElanConfig {
    in_channels: 64,
    branch_channels: 32,
    depth: 2,
    transition_channels: 64,
    activation: crate::tensor::ActivationKind::Silu,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScalableConfig {
    Elan(ElanConfig),
    Eelan(EelanConfig),
}

impl From<ElanConfig> for ScalableConfig {
    fn from(c: ElanConfig) -> Self {
        ScalableConfig::Elan(c)
    }
}

impl From<EelanConfig> for ScalableConfig {
    fn from(c: EelanConfig) -> Self {
        ScalableConfig::Eelan(c)
    }
}

impl ScalableConfig {
    pub fn elan(&self) -> &ElanConfig {
        match self {
            ScalableConfig::Elan(e) => e,
            ScalableConfig::Eelan(e) => &e.elan,
        }
    }

    fn with_elan(&self, elan: ElanConfig) -> Result<Self> {
        let out = match self {
            ScalableConfig::Elan(_) => ScalableConfig::Elan(elan),
            ScalableConfig::Eelan(e) => ScalableConfig::Eelan(EelanConfig { elan, ..e.clone() }),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScalableConfig::Elan(e) => e.validate(),
            ScalableConfig::Eelan(e) => e.validate(),
        }
    }

    pub fn build(&self, init: &mut WeightInit) -> Result<GraphIR> {
        match self {
            ScalableConfig::Elan(e) => build_elan(e, init),
            ScalableConfig::Eelan(e) => build_eelan(e, init),
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            ScalableConfig::Elan(e) => e.param_count(),
            ScalableConfig::Eelan(e) => e.param_count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    Compound,
    WidthOnly,
    DepthOnly,
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::Compound => "compound",
            ScaleMode::WidthOnly => "width-only",
            ScaleMode::DepthOnly => "depth-only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionRule {
    /// Transition width scaled by the width factor.
    #[default]
    Explicit,
    /// Transition width scaled by the concat widening induced by depth.
    Induced,
}

impl fmt::Display for TransitionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransitionRule::Explicit => "explicit",
            TransitionRule::Induced => "induced",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompoundOptions {
    /// Also scale stem and computational widths by the width factor.
    pub branch_width: bool,
    pub transition: TransitionRule,
}

/// In/out channel bookkeeping of one transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDrift {
    pub in_before: usize,
    pub in_after: usize,
    pub out_before: usize,
    pub out_after: usize,
    pub ratio_before: f64,
    pub ratio_after: f64,
    /// Output width that would keep the in/out ratio exactly.
    pub ratio_preserving_out: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftReport {
    pub transitions: Vec<TransitionDrift>,
}

impl DriftReport {
    pub fn any_flagged(&self) -> bool {
        self.transitions.iter().any(|t| t.flagged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPlan {
    pub mode: ScaleMode,
    pub depth_factor: f64,
    pub width_factor: f64,
    pub transition_rule: TransitionRule,
    pub old_depth: usize,
    pub new_depth: usize,
    pub old_branch_channels: usize,
    pub new_branch_channels: usize,
    pub old_concat_channels: usize,
    pub new_concat_channels: usize,
    pub old_transition_channels: usize,
    pub new_transition_channels: usize,
    /// `new concat / old concat`.
    pub induced_width_factor: f64,
    pub drift: DriftReport,
}

/// Nearest multiple of 8, at least 8.
pub fn round_channels(v: f64) -> usize {
    let g = CHANNEL_GRANULE as f64;
    ((v / g).round() * g).max(g) as usize
}

fn scale_channels(c: usize, factor: f64) -> usize {
    if factor == 1.0 {
        c
    } else {
        round_channels(c as f64 * factor)
    }
}

fn scale_depth(d: usize, factor: f64) -> usize {
    if factor == 1.0 {
        d
    } else {
        ((factor * d as f64).round() as usize).max(1)
    }
}

fn check_factor(name: &str, f: f64) -> Result<()> {
    if !(f.is_finite() && f > 0.0) {
        return Err(Error::Config(format!("{name} factor must be a positive number, got {f}")));
    }
    Ok(())
}

fn drift(old: &ElanConfig, new: &ElanConfig) -> DriftReport {
    let (ib, ia) = (old.concat_channels(), new.concat_channels());
    let (ob, oa) = (old.transition_channels, new.transition_channels);
    let preserving = ob as f64 * ia as f64 / ib as f64;
    DriftReport {
        transitions: vec![TransitionDrift {
            in_before: ib,
            in_after: ia,
            out_before: ob,
            out_after: oa,
            ratio_before: ob as f64 / ib as f64,
            ratio_after: oa as f64 / ia as f64,
            ratio_preserving_out: preserving,
            flagged: (oa as f64 - preserving).abs() > CHANNEL_GRANULE as f64,
        }],
    }
}

fn plan(
    mode: ScaleMode,
    alpha: f64,
    beta: f64,
    rule: TransitionRule,
    old: &ElanConfig,
    new: &ElanConfig,
) -> ScalingPlan {
    ScalingPlan {
        mode,
        depth_factor: alpha,
        width_factor: beta,
        transition_rule: rule,
        old_depth: old.depth,
        new_depth: new.depth,
        old_branch_channels: old.branch_channels,
        new_branch_channels: new.branch_channels,
        old_concat_channels: old.concat_channels(),
        new_concat_channels: new.concat_channels(),
        old_transition_channels: old.transition_channels,
        new_transition_channels: new.transition_channels,
        induced_width_factor: new.concat_channels() as f64 / old.concat_channels() as f64,
        drift: drift(old, new),
    }
}

/// Scales depth by `alpha` and the transition by `beta` (or by the induced
/// concat widening), optionally also widening the branches by `beta`.
pub fn compound_scale(
    cfg: &ScalableConfig,
    alpha: f64,
    beta: f64,
    opts: &CompoundOptions,
) -> Result<(ScalableConfig, ScalingPlan)> {
    check_factor("depth", alpha)?;
    check_factor("width", beta)?;
    cfg.validate()?;
    let old = cfg.elan();
    let mut new = old.clone();
    new.depth = scale_depth(old.depth, alpha);
    if opts.branch_width {
        new.branch_channels = scale_channels(old.branch_channels, beta);
    }
    new.transition_channels = match opts.transition {
        TransitionRule::Explicit => scale_channels(old.transition_channels, beta),
        TransitionRule::Induced => {
            let induced = new.concat_channels() as f64 / old.concat_channels() as f64;
            scale_channels(old.transition_channels, induced)
        }
    };
    let p = plan(ScaleMode::Compound, alpha, beta, opts.transition, old, &new);
    Ok((cfg.with_elan(new)?, p))
}

/// Scales only width (branches and transition) or only depth.
pub fn naive_scale(cfg: &ScalableConfig, mode: ScaleMode, factor: f64) -> Result<(ScalableConfig, ScalingPlan)> {
    check_factor("scaling", factor)?;
    cfg.validate()?;
    let old = cfg.elan();
    let mut new = old.clone();
    let (alpha, beta) = match mode {
        ScaleMode::WidthOnly => {
            new.branch_channels = scale_channels(old.branch_channels, factor);
            new.transition_channels = scale_channels(old.transition_channels, factor);
            (1.0, factor)
        }
        ScaleMode::DepthOnly => {
            new.depth = scale_depth(old.depth, factor);
            (factor, 1.0)
        }
        ScaleMode::Compound => {
            return Err(Error::Config("naive scaling takes width-only or depth-only".into()));
        }
    };
    let p = plan(mode, alpha, beta, TransitionRule::Explicit, old, &new);
    Ok((cfg.with_elan(new)?, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub depth: usize,
    pub branch_channels: usize,
    pub concat_channels: usize,
    pub transition_channels: usize,
    pub transition_ratio: f64,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub input_size: usize,
    pub base: ReportRow,
    pub scaled: ReportRow,
    pub delta_params: i64,
    pub delta_macs: i64,
}

fn row(label: &str, cfg: &ScalableConfig, size: usize) -> Result<ReportRow> {
    let g = cfg.build(&mut WeightInit::new(0))?;
    let e = cfg.elan();
    Ok(ReportRow {
        label: label.to_string(),
        depth: e.depth,
        branch_channels: e.branch_channels,
        concat_channels: e.concat_channels(),
        transition_channels: e.transition_channels,
        transition_ratio: e.transition_channels as f64 / e.concat_channels() as f64,
        params: g.count_params().total,
        macs: g.count_macs(size, size)?.total_macs,
    })
}

/// Builds both configurations and compares their accounting on a
/// `size × size` input.
pub fn scaling_report(base: &ScalableConfig, scaled: &ScalableConfig, size: usize) -> Result<ScalingReport> {
    let base = row("base", base, size)?;
    let scaled = row("scaled", scaled, size)?;
    Ok(ScalingReport {
        input_size: size,
        delta_params: scaled.params as i64 - base.params as i64,
        delta_macs: scaled.macs as i64 - base.macs as i64,
        base,
        scaled,
    })
}

impl fmt::Display for ScalingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let header = ["", "depth", "branch", "concat", "transition", "out/in", "params", "MACs"];
        let cells = |r: &ReportRow| {
            vec![
                r.label.clone(),
                r.depth.to_string(),
                r.branch_channels.to_string(),
                r.concat_channels.to_string(),
                r.transition_channels.to_string(),
                format!("{:.4}", r.transition_ratio),
                r.params.to_string(),
                r.macs.to_string(),
            ]
        };
        let delta = vec![
            "delta".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            format!("{:+}", self.delta_params),
            format!("{:+}", self.delta_macs),
        ];
        let rows = [header.iter().map(|s| s.to_string()).collect(), cells(&self.base), cells(&self.scaled), delta];
        let widths: Vec<usize> =
            (0..header.len()).map(|i| rows.iter().map(|r: &Vec<String>| r[i].len()).max().unwrap_or(0)).collect();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            writeln!(f, "{}", line.join("  ").trim_end())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ScalableConfig {
        CANONICAL_BASE.into()
    }

    #[test]
    fn channel_rounding() {
        assert_eq!(round_channels(40.0), 40);
        assert_eq!(round_channels(43.9), 40);
        assert_eq!(round_channels(44.0), 48);
        assert_eq!(round_channels(1.0), 8);
    }

    #[test]
    fn unit_factors_are_identity() {
        let (c, p) =
            compound_scale(&base(), 1.0, 1.0, &CompoundOptions { branch_width: true, ..Default::default() }).unwrap();
        assert_eq!(c, base());
        assert!(!p.drift.any_flagged());
        for mode in [ScaleMode::WidthOnly, ScaleMode::DepthOnly] {
            let (c, p) = naive_scale(&base(), mode, 1.0).unwrap();
            assert_eq!(c, base());
            assert!(!p.drift.any_flagged());
        }
    }

    #[test]
    fn branch_scaled_explicit_example() {
        let opts = CompoundOptions { branch_width: true, transition: TransitionRule::Explicit };
        let (c, p) = compound_scale(&base(), 1.5, 1.25, &opts).unwrap();
        let e = c.elan();
        assert_eq!((e.depth, e.branch_channels, e.transition_channels), (3, 40, 80));
        assert_eq!(e.concat_channels(), 200);
        let t = &p.drift.transitions[0];
        assert_eq!(t.ratio_after, 0.4);
        assert_eq!(t.ratio_before, 0.5);
        assert_eq!(t.ratio_preserving_out, 100.0);
        assert!(t.flagged);
    }

    #[test]
    fn default_compound_preserves_ratio() {
        let (c, p) = compound_scale(&base(), 1.5, 1.25, &CompoundOptions::default()).unwrap();
        assert_eq!(c.elan().transition_channels, 80);
        assert_eq!(p.induced_width_factor, 1.25);
        assert!(!p.drift.any_flagged());
    }

    #[test]
    fn depth_only_flags_drift() {
        let (c, p) = naive_scale(&base(), ScaleMode::DepthOnly, 2.0).unwrap();
        assert_eq!(c.elan().branch_channels, 32);
        assert_eq!(p.new_concat_channels, 192);
        assert!(p.drift.any_flagged());
        let (c, _) = naive_scale(&base(), ScaleMode::WidthOnly, 1.25).unwrap();
        assert_eq!(c.elan().depth, 2);
    }

    #[test]
    fn bad_factors() {
        assert!(compound_scale(&base(), 0.0, 1.0, &CompoundOptions::default()).is_err());
        assert!(compound_scale(&base(), 1.0, -1.0, &CompoundOptions::default()).is_err());
        assert!(naive_scale(&base(), ScaleMode::DepthOnly, f64::NAN).is_err());
        assert!(naive_scale(&base(), ScaleMode::Compound, 1.0).is_err());
    }

    #[test]
    fn report_on_identical_configs() {
        let r = scaling_report(&base(), &base(), 32).unwrap();
        assert_eq!((r.delta_params, r.delta_macs), (0, 0));
        assert_eq!(r.base.params, CANONICAL_BASE.param_count());
        let text = r.to_string();
        assert!(text.contains("out/in"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn eelan_scaling_keeps_group_settings() {
        let e = ScalableConfig::Eelan(EelanConfig { elan: CANONICAL_BASE, groups: 2, multiplier: 2 });
        let (c, _) = compound_scale(&e, 2.0, 1.0, &CompoundOptions::default()).unwrap();
        let ScalableConfig::Eelan(s) = c else { panic!() };
        assert_eq!((s.groups, s.multiplier, s.elan.depth), (2, 2, 4));
    }
}
