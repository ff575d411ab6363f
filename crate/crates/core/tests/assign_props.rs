use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use rpk_core::assign::{
    apply_objectness_bound, assign_coarse_to_fine, assign_independent, dynamic_k_match, AssignerConfig, BBox,
    Candidate, CandidateKey, GroundTruthBox, ImageSize, MatchTarget, PredictionGrid, Provenance,
};
use rpk_core::oracle;

const IMAGE: ImageSize = ImageSize { width: 64.0, height: 64.0 };

fn random_grid(r: &mut impl Rng, stride: f64, n: usize, classes: usize) -> PredictionGrid {
    let anchors = vec![(8.0, 10.0), (16.0, 14.0), (28.0, 30.0)];
    let len = anchors.len() * n * n * (5 + classes);
    let raw = (0..len).map(|_| r.random_range(-2.0..2.0)).collect();
    PredictionGrid::new(stride, anchors, n, n, classes, raw).unwrap()
}

fn random_gts(r: &mut impl Rng, count: usize, classes: usize) -> Vec<GroundTruthBox> {
    (0..count)
        .map(|_| GroundTruthBox {
            class_id: r.random_range(0..classes),
            cx: r.random_range(0.0..=1.0),
            cy: r.random_range(0.0..=1.0),
            w: r.random_range(0.05..0.6),
            h: r.random_range(0.05..0.6),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dynamic_k_equals_exhaustive_ranking(seed in any::<u64>(), n in 1usize..=20, g in 1usize..=4, coarse_costs in any::<bool>()) {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
        let q = |v: f64| if coarse_costs { (v * 4.0).round() / 4.0 } else { v };
        let candidates: Vec<Candidate> = (0..n)
            .map(|i| {
                let (x, y) = (q(r.random_range(0.0..8.0)), q(r.random_range(0.0..8.0)));
                let (w, h) = (q(r.random_range(0.5..4.0)).max(0.25), q(r.random_range(0.5..4.0)).max(0.25));
                Candidate {
                    key: CandidateKey { level: 0, anchor: 0, gy: 0, gx: i },
                    bbox: BBox::from_center(x, y, w, h),
                    class_scores: vec![q(r.random_range(0.05..1.0)).max(0.25), 0.5],
                }
            })
            .collect();
        let gts: Vec<MatchTarget> = (0..g)
            .map(|_| MatchTarget {
                class_id: r.random_range(0..2),
                bbox: BBox::from_center(r.random_range(1.0..7.0), r.random_range(1.0..7.0), r.random_range(1.0..4.0), r.random_range(1.0..4.0)),
            })
            .collect();
        let eligible: Vec<Vec<usize>> = (0..g).map(|_| (0..n).filter(|_| r.random_bool(0.7)).collect()).collect();
        let cfg = AssignerConfig::default();
        let m = dynamic_k_match(&candidates, &gts, &eligible, &cfg).unwrap();
        let (selected, owner) = oracle::dynamic_k(&candidates, &gts, &eligible, &cfg);
        let mut mine = m.selected.clone();
        mine.iter_mut().for_each(|s| s.sort_unstable());
        prop_assert_eq!(mine, selected);
        prop_assert_eq!(m.owner, owner);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coarse_to_fine_laws(seed in any::<u64>(), count in 0usize..5) {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
        let lead = vec![random_grid(&mut r, 8.0, 8, 3), random_grid(&mut r, 16.0, 4, 3)];
        let gts = random_gts(&mut r, count, 3);
        let cfg = AssignerConfig::default();
        let out = assign_coarse_to_fine(&lead, &gts, IMAGE, &cfg).unwrap();
        prop_assert!(out.lead.keys().is_subset(&out.aux.keys()));
        for rec in &out.lead.records {
            let twin = out.aux.records.iter().find(|a| a.key() == rec.key()).unwrap();
            prop_assert_eq!(twin, rec);
        }
        for rec in out.lead.records.iter().chain(&out.aux.records) {
            prop_assert!((0.0..=1.0).contains(&rec.objectness));
            prop_assert!(rec.class_id < 3 && rec.gt < gts.len());
            prop_assert!(rec.box_target.iter().all(|v| v.is_finite()));
            match rec.provenance {
                Provenance::Fine => prop_assert_eq!(rec.upper_bound, 1.0),
                Provenance::CoarseOnly => prop_assert!(rec.upper_bound < 1.0 && rec.distance > 0.0),
            }
        }
        let bounded = apply_objectness_bound(&out.aux, cfg.r_c).unwrap();
        for (b, a) in bounded.records.iter().zip(&out.aux.records) {
            prop_assert!(b.objectness <= a.objectness);
            prop_assert!(b.objectness <= b.upper_bound);
            if b.provenance == Provenance::Fine {
                prop_assert_eq!(b, a);
            }
        }

        // The auxiliary head's own predictions play no part.
        let again = assign_coarse_to_fine(&lead, &gts, IMAGE, &cfg).unwrap();
        prop_assert_eq!(again, out);
    }

    #[test]
    fn independent_assignment_with_identical_heads(seed in any::<u64>(), count in 0usize..4) {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
        let lead = vec![random_grid(&mut r, 8.0, 8, 2)];
        let gts = random_gts(&mut r, count, 2);
        let (a, b) = assign_independent(&lead, &lead.clone(), &gts, IMAGE, &AssignerConfig::default()).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn worse_aux_boxes_give_lower_soft_labels() {
    let gts = [GroundTruthBox { class_id: 0, cx: 0.5, cy: 0.5, w: 0.125, h: 0.125 }];
    let anchors = vec![(8.0, 8.0)];
    let lead = PredictionGrid::zeros(2.0, anchors.clone(), 32, 32, 1).unwrap();
    let mut aux = lead.clone();
    for gy in 0..32 {
        for gx in 0..32 {
            let t = aux.cell_mut(0, gy, gx);
            t[2] = 12.0;
            t[3] = 12.0;
        }
    }
    let cfg = AssignerConfig::default();
    let (l, a) = assign_independent(&[lead], &[aux], &gts, IMAGE, &cfg).unwrap();
    let mut shared = 0;
    for rec in &a.records {
        if let Some(lr) = l.records.iter().find(|x| x.key() == rec.key()) {
            assert!(rec.objectness <= lr.objectness);
            shared += 1;
        }
    }
    assert!(shared > 0);
}

#[test]
fn synthetic_scene_aux_has_at_least_as_many_positives() {
    let mut r = Xoshiro256PlusPlus::seed_from_u64(2022);
    let lead = vec![random_grid(&mut r, 8.0, 8, 2)];
    let gts = [
        GroundTruthBox { class_id: 0, cx: 0.3, cy: 0.4, w: 0.25, h: 0.3 },
        GroundTruthBox { class_id: 1, cx: 0.7, cy: 0.65, w: 0.35, h: 0.2 },
    ];
    let out = assign_coarse_to_fine(&lead, &gts, IMAGE, &AssignerConfig::default()).unwrap();
    assert!(!out.lead.records.is_empty());
    assert!(out.aux.records.len() >= out.lead.records.len());
}
