use forge_planner::{
    cardinality, flop_count, plan_sparse_doped, plan_sparse_factorized, plan_sparse_parallel,
    plan_sparse_wide, verify_isoflop, LayerSpec, TransformPlan,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec_strategy() -> impl Strategy<Value = LayerSpec> {
    prop_oneof![
        (8usize..=2048, 8usize..=2048).prop_map(|(i, o)| LayerSpec::linear(i, o)),
        (
            8usize..=256,
            8usize..=256,
            prop::sample::select(vec![1usize, 3, 5]),
            1usize..=16
        )
            .prop_map(|(i, o, k, hw)| LayerSpec::conv2d(i, o, (k, k), (hw, hw))),
    ]
}

fn sparsity_strategy() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![0.5, 0.75, 0.9])
}

fn all_plans(spec: &LayerSpec, s: f64) -> Vec<TransformPlan> {
    vec![
        plan_sparse_wide(spec, s, 1).unwrap(),
        plan_sparse_parallel(spec, s).unwrap(),
        plan_sparse_factorized(spec, s).unwrap(),
        plan_sparse_doped(spec, s).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn every_transform_is_iso_flop(spec in spec_strategy(), s in sparsity_strategy()) {
        let dense = flop_count(&spec, 1, 0.0).unwrap();
        for plan in all_plans(&spec, s) {
            let r = verify_isoflop(&plan, &spec, 0.01);
            prop_assert!(r.pass, "{:?}: {}", plan.transform, r.relative_error);
            prop_assert_eq!(r.dense_macs, dense);
        }
        for plan in [plan_sparse_parallel(&spec, s).unwrap(), plan_sparse_factorized(&spec, s).unwrap()] {
            prop_assert!(verify_isoflop(&plan, &spec, 1e-9).pass);
        }
    }

    #[test]
    fn active_weights_match_effective_sparsity(spec in spec_strategy(), s in sparsity_strategy()) {
        for plan in all_plans(&spec, s) {
            let expect = ((1.0 - plan.effective_sparsity) * plan.total_weight_positions as f64).round() as u64;
            prop_assert_eq!(plan.active_weights, expect);
            prop_assert!((0.0..1.0).contains(&plan.effective_sparsity));
        }
    }

    #[test]
    fn widening_is_monotone_in_sparsity(spec in spec_strategy(), a in 0.0f64..0.95, b in 0.0f64..0.95) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let card = |p: TransformPlan| cardinality(&p, &spec);
        prop_assert!(card(plan_sparse_wide(&spec, lo, 1).unwrap()) <= card(plan_sparse_wide(&spec, hi, 1).unwrap()));
        prop_assert!(card(plan_sparse_parallel(&spec, lo).unwrap()) <= card(plan_sparse_parallel(&spec, hi).unwrap()));
        prop_assert!(card(plan_sparse_factorized(&spec, lo).unwrap()) <= card(plan_sparse_factorized(&spec, hi).unwrap()));
    }

    #[test]
    fn identity_at_zero_sparsity(spec in spec_strategy()) {
        let dense = spec.dense_macs();
        let w = plan_sparse_wide(&spec, 0.0, 1).unwrap();
        prop_assert_eq!(&w.rounded_scale, &vec![spec.d_in, spec.d_out]);
        let p = plan_sparse_parallel(&spec, 0.0).unwrap();
        prop_assert_eq!(&p.rounded_scale, &vec![1]);
        let d = plan_sparse_doped(&spec, 0.0).unwrap();
        prop_assert_eq!(&d.rounded_scale, &vec![0]);
        for plan in [w, p, d] {
            prop_assert_eq!(plan.effective_sparsity, 0.0);
            prop_assert_eq!(plan.predicted_macs, dense);
        }
    }
}

#[test]
fn doped_sparse_branch_shrinks_with_sparsity() {
    let spec = LayerSpec::linear(256, 384);
    let actives: Vec<u64> = [0.1, 0.3, 0.5, 0.7, 0.9, 0.95]
        .iter()
        .map(|&s| {
            let p = plan_sparse_doped(&spec, s).unwrap();
            p.weights
                .iter()
                .filter(|w| w.masked)
                .map(|w| w.active)
                .sum()
        })
        .collect();
    assert!(actives.windows(2).all(|w| w[1] < w[0]), "{actives:?}");
}

/// Closed-form cardinalities with unrounded scales all reduce to
/// `d_in·d_out/(1-s)`.
#[test]
fn unrounded_cardinality_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let (fi, fo): (f64, f64) = (
            rng.gen_range(1.0..4096.0f64).round(),
            rng.gen_range(1.0..4096.0f64).round(),
        );
        let s: f64 = rng.gen_range(0.0..0.99);
        let target = fi * fo / (1.0 - s);
        let k_sw = (1.0 / (1.0 - s)).sqrt();
        let wide = (k_sw * fi) * (k_sw * fo);
        let parallel = (1.0 / (1.0 - s)) * fi * fo;
        let d_sf = fi * fo / ((fi + fo) * (1.0 - s));
        let factorized = d_sf * (fi + fo);
        for c in [wide, parallel, factorized] {
            assert!((c - target).abs() / target < 1e-12);
        }
        let spec = LayerSpec::linear(fi as usize, fo as usize);
        assert_eq!(
            cardinality(&plan_sparse_doped(&spec, s).unwrap(), &spec),
            (fi * fo) as u64
        );
        let lib =
            forge_planner::unrounded_cardinality(forge_planner::Transform::SparseWide, &spec, s);
        assert!((lib - target).abs() / target < 1e-12);
    }
}

#[test]
fn planning_is_pure() {
    let spec = LayerSpec::conv2d(24, 40, (3, 3), (7, 7));
    for s in [0.5, 0.75, 0.9] {
        assert_eq!(all_plans(&spec, s), all_plans(&spec, s));
    }
}
