use forge_planner::{
    cardinality, flop_count, plan_dense, plan_low_rank_dense, plan_sparse_doped,
    plan_sparse_factorized, plan_sparse_parallel, plan_sparse_wide, verify_isoflop, LayerSpec,
    PlanError, Transform,
};

/// Counts multiply-accumulates by walking an explicit stride-1 convolution.
fn brute_force_conv_macs(
    batch: usize,
    c_in: usize,
    c_out: usize,
    k: (usize, usize),
    out: (usize, usize),
) -> u64 {
    let mut macs = 0u64;
    for _b in 0..batch {
        for _oy in 0..out.0 {
            for _ox in 0..out.1 {
                for _co in 0..c_out {
                    for _ci in 0..c_in {
                        for _ky in 0..k.0 {
                            for _kx in 0..k.1 {
                                macs += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    macs
}

#[test]
fn flop_count_examples() {
    assert_eq!(flop_count(&LayerSpec::linear(3, 4), 1, 0.0).unwrap(), 12);
    assert_eq!(
        flop_count(&LayerSpec::linear(64, 64), 2, 0.75).unwrap(),
        2048
    );
    let conv = LayerSpec::conv2d(3, 8, (3, 3), (4, 4));
    let oracle = brute_force_conv_macs(1, 3, 8, (3, 3), (4, 4));
    assert_eq!(oracle, 3456);
    assert_eq!(flop_count(&conv, 1, 0.0).unwrap(), oracle);
    assert_eq!(
        flop_count(&conv, 5, 0.0).unwrap(),
        brute_force_conv_macs(5, 3, 8, (3, 3), (4, 4))
    );
    assert!(matches!(
        flop_count(&conv, 1, 1.0),
        Err(PlanError::InvalidSparsity(_))
    ));
}

#[test]
fn sparse_wide_examples() {
    let spec = LayerSpec::linear(64, 64);
    let p = plan_sparse_wide(&spec, 0.75, 1).unwrap();
    assert!((p.scale - 2.0).abs() < 1e-12);
    assert_eq!(p.rounded_scale, vec![128, 128]);
    assert_eq!(p.active_weights, 4096);
    assert_eq!(p.predicted_macs, 4096);
    assert_eq!(cardinality(&p, &spec), 16384);

    let id = plan_sparse_wide(&spec, 0.0, 1).unwrap();
    assert_eq!(id.rounded_scale, vec![64, 64]);
    assert_eq!(id.effective_sparsity, 0.0);
    assert_eq!(id.predicted_macs, spec.dense_macs());

    let p = plan_sparse_wide(&LayerSpec::linear(100, 100), 0.9, 1).unwrap();
    let dense = flop_count(&LayerSpec::linear(100, 100), 1, 0.0).unwrap() as f64;
    assert!((p.predicted_macs as f64 - dense).abs() / dense <= 0.01);
    assert!(verify_isoflop(&p, &LayerSpec::linear(100, 100), 0.01).pass);
}

#[test]
fn published_widths_under_two_quanta() {
    // 3072·√2 = 4344.46 and 768·√2 = 1086.1; the published widths are 4344 and 1092.
    let ff = plan_sparse_wide(&LayerSpec::linear(3072, 3072), 0.5, 1).unwrap();
    assert_eq!(ff.rounded_scale[0], 4344);
    let model = plan_sparse_wide(&LayerSpec::linear(768, 768), 0.5, 1).unwrap();
    assert_eq!(model.rounded_scale[0], 1086);
    let model = plan_sparse_wide(&LayerSpec::linear(768, 768), 0.5, 12).unwrap();
    assert_eq!(model.rounded_scale[0], 1092);
}

#[test]
fn sparse_parallel_examples() {
    let spec = LayerSpec::linear(40, 30);
    let p = plan_sparse_parallel(&spec, 0.5).unwrap();
    assert_eq!(p.rounded_scale, vec![2]);
    assert!((p.effective_sparsity - 0.5).abs() < 1e-12);
    let p = plan_sparse_parallel(&spec, 0.9).unwrap();
    assert_eq!(p.rounded_scale, vec![10]);
    assert_eq!(p.predicted_macs, 10 * 40 * 30 / 10);
    assert_eq!(p.predicted_macs, spec.dense_macs());
    assert_eq!(
        plan_sparse_parallel(&spec, 0.0).unwrap().rounded_scale,
        vec![1]
    );
    let r = verify_isoflop(&plan_sparse_parallel(&spec, 0.75).unwrap(), &spec, 0.01);
    assert_eq!(r.relative_error, 0.0);
}

#[test]
fn sparse_factorized_examples() {
    let sq = LayerSpec::linear(768, 768);
    assert_eq!(
        plan_sparse_factorized(&sq, 0.0).unwrap().rounded_scale,
        vec![384]
    );
    let p = plan_sparse_factorized(&sq, 0.75).unwrap();
    assert_eq!(p.rounded_scale, vec![1536]);
    assert_eq!(1536u64 * 1536 / 4, 768 * 768);
    assert_eq!(p.predicted_macs, 768 * 768);

    let rect = LayerSpec::linear(512, 2048);
    let p = plan_sparse_factorized(&rect, 0.5).unwrap();
    assert_eq!(p.rounded_scale, vec![819]);
    let total = 819.0 * (512.0 + 2048.0);
    assert!((p.effective_sparsity - (1.0 - 512.0 * 2048.0 / total)).abs() < 1e-9);
    assert!(verify_isoflop(&p, &rect, 1e-9).pass);
}

#[test]
fn sparse_doped_examples() {
    let d = 96;
    let spec = LayerSpec::linear(d, d);
    let p = plan_sparse_doped(&spec, 0.5).unwrap();
    assert_eq!(p.rounded_scale, vec![d / 4]);
    let low_rank = (d / 4) * 2 * d;
    assert_eq!(p.predicted_macs as usize, low_rank + d * d / 2);
    assert_eq!(p.predicted_macs as usize, d * d);

    let zero = plan_sparse_doped(&spec, 0.0).unwrap();
    assert_eq!(zero.rounded_scale, vec![0]);
    assert_eq!(zero.effective_sparsity, 0.0);
    assert_eq!(zero.predicted_macs, spec.dense_macs());

    let rect = LayerSpec::linear(256, 512);
    let p = plan_sparse_doped(&rect, 0.9).unwrap();
    assert_eq!(
        p.rounded_scale,
        vec![(0.9f64 * 131072.0 / 768.0).round() as usize]
    );
    assert_eq!(p.rounded_scale, vec![154]);
    assert!(verify_isoflop(&p, &rect, 0.01).pass);
    assert_eq!(cardinality(&p, &rect), 256 * 512);
    assert_eq!(
        cardinality(
            &plan_sparse_doped(&LayerSpec::linear(64, 64), 0.3).unwrap(),
            &LayerSpec::linear(64, 64)
        ),
        4096
    );
}

#[test]
fn low_rank_examples() {
    let d = 50;
    let p = plan_low_rank_dense(&LayerSpec::linear(d, d), 1.0).unwrap();
    assert_eq!(p.rounded_scale[2], d / 2);
    assert_eq!(p.effective_sparsity, 0.0);
    let p = plan_low_rank_dense(&LayerSpec::linear(64, 64), 2.0).unwrap();
    assert_eq!(p.rounded_scale[2], 64);
    // 128·256·1.41/384 = 120.32 after widening both sides by 1.41.
    let p = plan_low_rank_dense(&LayerSpec::linear(128, 256), 1.41).unwrap();
    assert_eq!(
        p.rounded_scale[2],
        (128.0f64 * 256.0 * 1.41 / 384.0).round() as usize
    );
    assert!(matches!(
        plan_low_rank_dense(&LayerSpec::linear(8, 8), 0.9),
        Err(PlanError::InvalidWidening(_))
    ));
}

#[test]
fn dense_audit_and_invariants() {
    let spec = LayerSpec::conv2d(16, 32, (3, 3), (8, 8));
    let p = plan_dense(&spec).unwrap();
    assert_eq!(p.transform, Transform::Dense);
    assert_eq!((p.nominal_sparsity, p.effective_sparsity), (0.0, 0.0));
    assert_eq!(p.scale, 1.0);
    let r = verify_isoflop(&p, &spec, 0.01);
    assert!(r.pass && r.relative_error == 0.0);
    assert_eq!(r.dense_weights, r.active_weights);
}

#[test]
fn rejects_full_sparsity_everywhere() {
    let spec = LayerSpec::linear(8, 8);
    for s in [1.0, 1.5, -0.1] {
        assert!(plan_sparse_wide(&spec, s, 1).is_err());
        assert!(plan_sparse_parallel(&spec, s).is_err());
        assert!(plan_sparse_factorized(&spec, s).is_err());
        assert!(plan_sparse_doped(&spec, s).is_err());
    }
}
