//! Slow reference implementations written straight from the definitions,
//! kept independent of the optimized code paths they check.

use crate::assign::{iou, AssignerConfig, Candidate, MatchTarget};
use crate::graph::RepBlockSpec;
use crate::tensor::{BatchNormSpec, ConvSpec, Shape, Tensor};

/// Direct convolution: every output is summed from the definition with
/// explicit bounds checks for zero padding.
pub fn conv2d(x: &Tensor<f64>, c: &ConvSpec<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (kh, kw) = c.kernel;
    let (sh, sw) = c.stride;
    let (ph, pw) = c.padding;
    let oh = (s.h + 2 * ph - kh) / sh + 1;
    let ow = (s.w + 2 * pw - kw) / sw + 1;
    let cin_g = c.in_channels / c.groups;
    let cout_g = c.out_channels / c.groups;
    let mut out = vec![0.0; s.n * c.out_channels * oh * ow];
    for n in 0..s.n {
        for o in 0..c.out_channels {
            let g = o / cout_g;
            for y in 0..oh {
                for x_ in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..cin_g {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (y * sh + u) as isize - ph as isize;
                                let ix = (x_ * sw + v) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let w = c.weight[((o * cin_g + i) * kh + u) * kw + v];
                                acc += w * x.get(n, g * cin_g + i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[((n * c.out_channels + o) * oh + y) * ow + x_] = acc + c.bias[o];
                }
            }
        }
    }
    Tensor::new(Shape::new(s.n, c.out_channels, oh, ow), out).expect("shape is consistent")
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn batch_norm(x: &Tensor<f64>, bn: &BatchNormSpec<f64>) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |[n, c, h, w]| {
        (x.get(n, c, h, w) - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt() * bn.gamma[c] + bn.beta[c]
    })
    .expect("shape is consistent")
}

/// Multi-branch rep block evaluated branch by branch.
pub fn rep_block(rep: &RepBlockSpec<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut branches = vec![batch_norm(&conv2d(x, &rep.dense.conv), &rep.dense.bn)];
    if let Some(pw) = &rep.pointwise {
        branches.push(batch_norm(&conv2d(x, &pw.conv), &pw.bn));
    }
    if let Some(bn) = &rep.identity_bn {
        branches.push(batch_norm(x, bn));
    }
    let shape = branches[0].shape();
    Tensor::from_fn(shape, |[n, c, h, w]| branches.iter().map(|b| b.get(n, c, h, w)).sum())
        .expect("shape is consistent")
}

fn cost(c: &Candidate, gt: &MatchTarget, w: f64) -> f64 {
    let cls = c.class_scores.get(gt.class_id).copied().unwrap_or(0.0);
    -(cls + 1e-8).ln() - w * (iou(&c.bbox, &gt.bbox) + 1e-8).ln()
}

/// Dynamic-k selection by exhaustive ranking: a candidate is chosen for a
/// ground truth iff fewer than k eligible candidates beat it on
/// `(cost, index)`. Returns per-gt selections (ascending index) and owners.
pub fn dynamic_k(
    candidates: &[Candidate],
    gts: &[MatchTarget],
    eligible: &[Vec<usize>],
    cfg: &AssignerConfig,
) -> (Vec<Vec<usize>>, Vec<Option<usize>>) {
    let mut selected = Vec::new();
    for (gt, elig) in gts.iter().zip(eligible) {
        let ious: Vec<f64> = elig.iter().map(|&c| iou(&candidates[c].bbox, &gt.bbox)).collect();
        // Sum of the top_k IoUs: each IoU counts iff fewer than top_k others outrank it.
        let mut s = 0.0;
        for (i, &a) in ious.iter().enumerate() {
            let above = ious.iter().enumerate().filter(|&(j, &b)| b > a || (b == a && j < i)).count();
            if above < cfg.top_k {
                s += a;
            }
        }
        let k = (s.floor() as usize).max(1).min(elig.len());
        let mut chosen: Vec<usize> = elig
            .iter()
            .filter(|&&c| {
                let mine = cost(&candidates[c], gt, cfg.iou_weight);
                let better = elig
                    .iter()
                    .filter(|&&d| {
                        let theirs = cost(&candidates[d], gt, cfg.iou_weight);
                        theirs < mine || (theirs == mine && d < c)
                    })
                    .count();
                better < k
            })
            .copied()
            .collect();
        chosen.sort_unstable();
        selected.push(chosen);
    }
    let owner = (0..candidates.len())
        .map(|c| {
            let mut best: Option<(f64, usize)> = None;
            for (g, sel) in selected.iter().enumerate() {
                if sel.contains(&c) {
                    let v = cost(&candidates[c], &gts[g], cfg.iou_weight);
                    if best.is_none_or(|(b, _)| v < b) {
                        best = Some((v, g));
                    }
                }
            }
            best.map(|(_, g)| g)
        })
        .collect();
    (selected, owner)
}
