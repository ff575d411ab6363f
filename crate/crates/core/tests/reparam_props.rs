use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use rpk_core::graph::{single_input, ConvBn, GraphBuilder, NodeKind, RepBlockSpec};
use rpk_core::oracle;
use rpk_core::reparam::{
    apply_implicit, apply_reparam, fold_bn, fold_implicit, fuse_rep_block, plan_reparam, ImplicitCombine,
    ImplicitKnowledge, ImplicitPosition, RewriteMode, Verdict,
};
use rpk_core::tensor::{conv2d, ActivationKind, BatchNormSpec, ConvSpec, Shape, Tensor};

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn conv(r: &mut impl Rng, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> ConvSpec<f64> {
    let mut c = ConvSpec::zeros(cin, cout, (k, k), (stride, stride), (k / 2, k / 2), groups).unwrap();
    c.weight.iter_mut().for_each(|w| *w = r.random_range(-0.5..0.5));
    c.bias.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
    c
}

fn bn(r: &mut impl Rng, c: usize) -> BatchNormSpec<f64> {
    BatchNormSpec {
        gamma: (0..c).map(|_| r.random_range(0.5..1.5)).collect(),
        beta: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
        running_mean: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
        running_var: (0..c).map(|_| r.random_range(0.01..4.0)).collect(),
        eps: 1e-5,
    }
}

fn input(r: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(Shape::new(1, c, h, w), |_| r.random_range(-1.0..1.0)).unwrap()
}

fn rep(r: &mut impl Rng, c: usize, groups: usize, pointwise: bool, identity: bool) -> RepBlockSpec<f64> {
    RepBlockSpec {
        dense: ConvBn { conv: conv(r, c, c, 3, 1, groups), bn: bn(r, c) },
        pointwise: pointwise.then(|| ConvBn { conv: conv(r, c, c, 1, 1, groups), bn: bn(r, c) }),
        identity_bn: identity.then(|| bn(r, c)),
    }
}

#[test]
fn conv_matches_direct_definition() {
    let mut r = rng(1);
    for (cin, cout, k, stride, groups, hw) in
        [(3, 4, 3, 1, 1, 7), (4, 6, 3, 2, 2, 9), (6, 6, 1, 1, 3, 5), (2, 4, 5, 1, 2, 6)]
    {
        let c = conv(&mut r, cin, cout, k, stride, groups);
        let x = input(&mut r, cin, hw, hw + 1);
        let d = conv2d(&x, &c).unwrap().max_abs_diff(&oracle::conv2d(&x, &c)).unwrap();
        assert!(d < 1e-12, "{d}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fusion_matches_branch_sum_in_f64(
        seed in any::<u64>(),
        c in prop::sample::select(vec![4usize, 8, 16]),
        groups in prop::sample::select(vec![1usize, 2, 4]),
        pointwise in any::<bool>(),
        identity in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let block = rep(&mut r, c, groups, pointwise, identity);
        let fused = fuse_rep_block(&block).unwrap();
        let x = input(&mut r, c, 8, 8);
        let d = oracle::rep_block(&block, &x).max_abs_diff(&conv2d(&x, &fused).unwrap()).unwrap();
        prop_assert!(d <= 1e-10, "deviation {}", d);
    }

    #[test]
    fn folding_identity_bn_twice_is_idempotent(seed in any::<u64>(), c in 1usize..8) {
        let mut r = rng(seed);
        let cv = conv(&mut r, c, c, 3, 1, 1);
        let id = BatchNormSpec::identity(c, 0.0);
        let once = fold_bn(&cv, &id).unwrap();
        prop_assert_eq!(fold_bn(&once, &id).unwrap(), once);
    }

    #[test]
    fn implicit_fold_matches_explicit(
        seed in any::<u64>(),
        before in any::<bool>(),
        multiply in any::<bool>(),
        k in prop::sample::select(vec![1usize, 3]),
    ) {
        let mut r = rng(seed);
        let mut cv = conv(&mut r, 4, 6, k, 1, 2);
        let position = if before { ImplicitPosition::BeforeConv } else { ImplicitPosition::AfterConv };
        let combine = if multiply { ImplicitCombine::Multiplication } else { ImplicitCombine::Addition };
        if before && !multiply {
            cv.padding = (0, 0);
        }
        let len = if before { 4 } else { 6 };
        let vector: Vec<f64> = (0..len).map(|_| r.random_range(-1.5..1.5)).collect();
        let x = input(&mut r, 4, 7, 7);
        let explicit = if before {
            oracle::conv2d(&apply_implicit(&x, &vector, combine).unwrap(), &cv)
        } else {
            apply_implicit(&oracle::conv2d(&x, &cv), &vector, combine).unwrap()
        };
        let folded = fold_implicit(&cv, &ImplicitKnowledge { vector, combine, position }).unwrap();
        prop_assert!(explicit.max_abs_diff(&conv2d(&x, &folded).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn expand_then_fuse_shrinks_and_preserves(seed in any::<u64>(), residual in any::<bool>()) {
        let mut r = rng(seed);
        let mut b = GraphBuilder::new();
        let x = b.input("x", 8);
        let c1 = b.conv(x, conv(&mut r, 8, 8, 3, 1, 1).cast(), "");
        let n1 = b.batch_norm(c1, bn(&mut r, 8).cast(), "");
        let a1 = b.activation(n1, ActivationKind::Silu, "");
        let c2 = b.conv(a1, conv(&mut r, 8, 8, 3, 1, 1).cast(), "");
        let n2 = b.batch_norm(c2, bn(&mut r, 8).cast(), "");
        let out = if residual { b.add(&[x, n2], "") } else { n2 };
        b.output("y", out, "");
        let g = b.finish();
        let plan = plan_reparam(&g);
        prop_assert_eq!(plan.len(), 2);
        prop_assert_eq!(plan[1].verdict, if residual { Verdict::RepConvN } else { Verdict::RepConv });

        let expanded = apply_reparam(&g, &plan, RewriteMode::Expand).unwrap();
        prop_assert!(expanded.validate().is_empty());
        let fused = apply_reparam(&expanded, &plan_reparam(&expanded), RewriteMode::Fuse).unwrap();
        prop_assert!(fused.validate().is_empty());
        prop_assert!(fused.primitive_node_count() < expanded.primitive_node_count());
        prop_assert!(fused.count_params().total < expanded.count_params().total);
        prop_assert!(!fused.nodes().iter().any(|n| matches!(n.kind, NodeKind::RepBlock(_))));

        let t = input(&mut r, 8, 10, 10).cast::<f32>();
        let before = g.eval(&single_input("x", t.clone())).unwrap();
        let after = fused.eval(&single_input("x", t)).unwrap();
        prop_assert!(after["y"].max_abs_diff(&before["y"]).unwrap() <= 1e-4);
    }
}

proptest! {
    #[test]
    fn ema_stays_between_its_operands(seed in any::<u64>(), decay in 0.0f64..=1.0) {
        let g = rpk_core::blocks::build_csp_block(
            rpk_core::blocks::CspKind::Dark, 4, true, ActivationKind::Silu, &mut rpk_core::init::WeightInit::new(seed),
        )
        .unwrap();
        let h = rpk_core::blocks::build_csp_block(
            rpk_core::blocks::CspKind::Dark, 4, true, ActivationKind::Silu, &mut rpk_core::init::WeightInit::new(seed ^ 1),
        )
        .unwrap();
        let (_, a) = rpk_core::graph_io::encode_graph(&g).unwrap();
        let (_, b) = rpk_core::graph_io::encode_graph(&h).unwrap();
        let e = rpk_core::reparam::ema_update(&a, &b, decay).unwrap();
        for ((ra, rb), re) in a.records().iter().zip(b.records()).zip(e.records()) {
            prop_assert_eq!(&re.name, &ra.name);
            for ((&x, &y), &z) in ra.data.iter().zip(&rb.data).zip(&re.data) {
                prop_assert!(z >= x.min(y) && z <= x.max(y), "{} not between {} and {}", z, x, y);
            }
        }
        prop_assert_eq!(rpk_core::reparam::ema_update(&a, &b, 1.0).unwrap(), a.clone());
        prop_assert_eq!(rpk_core::reparam::ema_update(&a, &b, 0.0).unwrap(), b);
    }
}
