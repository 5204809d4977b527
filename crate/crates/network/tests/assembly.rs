use forge_network::{
    build, single_layer_plan, BuildOptions, ExecPath, Network, NetworkError, ParamKind,
};
use forge_planner::{
    plan_dense, plan_network, plan_sparse_doped, plan_sparse_wide, LayerRole, LayerSpec,
    Nonlinearity, PlanOptions, Transform,
};
use forge_tensor::{Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn mlp(dims: &[usize]) -> Vec<LayerSpec> {
    let last = dims.len() - 2;
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let spec = LayerSpec::linear(w[0], w[1]);
            match i {
                0 => spec.with_role(LayerRole::BoundaryFirst),
                i if i == last => spec.with_role(LayerRole::BoundaryLast),
                _ => spec,
            }
        })
        .collect()
}

fn small_cnn() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv2d(3, 8, (3, 3), (8, 8)).with_geometry(1, 1),
        LayerSpec::conv2d(8, 16, (3, 3), (4, 4)).with_geometry(2, 1),
        LayerSpec::linear(16 * 4 * 4, 10),
    ]
}

fn relu_opts() -> BuildOptions {
    BuildOptions {
        hidden: Nonlinearity::Relu,
        ..BuildOptions::default()
    }
}

fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_relative_diff(b, 1e-12)
}

#[test]
fn dense_layer_is_matmul_plus_bias() {
    let spec = LayerSpec::linear(5, 3);
    let plan = single_layer_plan(&spec, &plan_dense(&spec).unwrap());
    let mut net: Network<f64> = build(&plan, &BuildOptions::default()).unwrap();
    net.set_param(
        "layer0.out.bias",
        Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap(),
    )
    .unwrap();
    let x = random(&[4, 5], 1);
    let (y, macs) = net.predict(&x, ExecPath::MaskedDense).unwrap();
    let w = net.param("layer0.main.weight").unwrap().value.clone();
    let b = net.param("layer0.out.bias").unwrap().value.clone();
    for i in 0..4 {
        for j in 0..3 {
            let expect: f64 = (0..5)
                .map(|k| x.data()[i * 5 + k] * w.data()[k * 3 + j])
                .sum::<f64>()
                + b.data()[j];
            assert!((y.data()[i * 3 + j] - expect).abs() < 1e-12);
        }
    }
    assert_eq!(macs, 4 * 15);
}

#[test]
fn dense_param_count() {
    let spec = LayerSpec::linear(64, 64);
    let net: Network<f64> = build(
        &single_layer_plan(&spec, &plan_dense(&spec).unwrap()),
        &BuildOptions::default(),
    )
    .unwrap();
    assert_eq!(net.param_count(true), 4160);
    assert_eq!(net.param_count(false), 4160);
}

#[test]
fn sparse_wide_param_count_and_densify() {
    let spec = LayerSpec::linear(64, 64);
    let plan = plan_sparse_wide(&spec, 0.75, 1).unwrap();
    let mut net: Network<f64> =
        build(&single_layer_plan(&spec, &plan), &BuildOptions::default()).unwrap();
    assert_eq!(net.param_count(true), 4096 + 128);
    assert_eq!(net.param_count(false), 16384 + 128);
    net.densify();
    assert_eq!(net.param_count(true), net.param_count(false));
}

#[test]
fn doped_at_zero_sparsity_is_dense() {
    let spec = LayerSpec::linear(12, 7);
    let doped = plan_sparse_doped(&spec, 0.0).unwrap();
    assert_eq!(doped.rounded_scale, vec![0]);
    let doped = doped.with_nonlinearity(Nonlinearity::Identity);
    let mut sd: Network<f64> =
        build(&single_layer_plan(&spec, &doped), &BuildOptions::default()).unwrap();
    let w = sd.param("layer0.sparse.weight").unwrap().value.clone();
    let mut dense: Network<f64> = build(
        &single_layer_plan(&spec, &plan_dense(&spec).unwrap()),
        &BuildOptions::default(),
    )
    .unwrap();
    dense.set_param("layer0.main.weight", w).unwrap();
    let x = random(&[9, 12], 3);
    let (a, _) = sd.predict(&x, ExecPath::MaskedDense).unwrap();
    let (b, _) = dense.predict(&x, ExecPath::MaskedDense).unwrap();
    assert!(max_rel(&a, &b) <= 1e-12);
}

/// Copies every dense weight into the matching IFT weight, and shares
/// biases and norms by name.
fn load_dense_weights(ift: &mut Network<f64>, dense: &Network<f64>) {
    let names: Vec<(String, ParamKind)> = ift
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.kind))
        .collect();
    for (name, kind) in names {
        let source = if kind == ParamKind::Weight {
            let layer = name.split('.').next().unwrap();
            format!("{layer}.main.weight")
        } else {
            name.clone()
        };
        let value = dense.param(&source).unwrap().value.clone();
        ift.set_param(&name, value).unwrap();
    }
}

#[test]
fn zero_sparsity_transforms_are_drop_in() {
    let dims = [10, 16, 12, 4];
    let specs = mlp(&dims);
    let dense_plan = plan_network(&specs, &PlanOptions::new(Transform::Dense, 0.0)).unwrap();
    let x = random(&[6, 10], 11);
    for hidden in [Nonlinearity::Relu, Nonlinearity::BatchnormRelu] {
        let opts = BuildOptions {
            hidden,
            ..BuildOptions::default()
        };
        let mut dense: Network<f64> = build(&dense_plan, &opts).unwrap();
        let (reference, _) = dense.predict(&x, ExecPath::MaskedDense).unwrap();
        for t in [
            Transform::SparseWide,
            Transform::SparseParallel,
            Transform::SparseDoped,
        ] {
            let po = PlanOptions::new(t, 0.0).nonlinearity(Nonlinearity::Identity);
            let plan = plan_network(&specs, &po).unwrap();
            let mut ift: Network<f64> = build(&plan, &opts).unwrap();
            load_dense_weights(&mut ift, &dense);
            for path in [ExecPath::MaskedDense, ExecPath::Compressed] {
                let (y, _) = ift.predict(&x, path).unwrap();
                let err = max_rel(&y, &reference);
                assert!(err <= 1e-10, "{t} {path:?} {hidden:?}: {err}");
            }
        }
    }
}

#[test]
fn mac_counter_matches_plan() {
    let x = random(&[5, 32], 4);
    for t in [
        Transform::Dense,
        Transform::SparseWide,
        Transform::SparseParallel,
        Transform::SparseFactorized,
        Transform::SparseDoped,
        Transform::LowRankDense,
    ] {
        let plan = plan_network(&mlp(&[32, 48, 48, 10]), &PlanOptions::new(t, 0.8)).unwrap();
        let mut net: Network<f64> = build(&plan, &BuildOptions::default()).unwrap();
        for path in [ExecPath::MaskedDense, ExecPath::Compressed] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let pass = net
                .forward(&mut tape, xv, Mode::Train, path, false)
                .unwrap();
            let predicted: Vec<u64> = net.predicted_layer_macs().iter().map(|m| m * 5).collect();
            assert_eq!(pass.layer_macs, predicted, "{t} {path:?}");
            assert_eq!(tape.macs(), plan.planned_total_macs * 5);
        }
    }
}

#[test]
fn conv_mac_counter_matches_plan() {
    let x = random(&[2, 3, 8, 8], 5);
    for t in [
        Transform::Dense,
        Transform::SparseWide,
        Transform::SparseParallel,
        Transform::SparseFactorized,
        Transform::SparseDoped,
    ] {
        let po = PlanOptions::new(t, 0.75).keep_boundary_dense(false);
        let plan = plan_network(&small_cnn(), &po).unwrap();
        let mut net: Network<f64> = build(&plan, &BuildOptions::default()).unwrap();
        assert_eq!(net.input_shape(), &[3, 8, 8]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = net
            .forward(&mut tape, xv, Mode::Train, ExecPath::MaskedDense, false)
            .unwrap();
        for (got, want) in pass.layer_macs.iter().zip(net.predicted_layer_macs()) {
            assert!(got.abs_diff(want * 2) <= 1, "{t}: {got} vs {}", want * 2);
        }
        assert_eq!(tape.value(pass.output).shape(), &[2, 10]);
    }
}

#[test]
fn masked_and_compressed_paths_agree() {
    let x = random(&[7, 32], 6);
    for t in Transform::SPARSE_FAMILY {
        let plan = plan_network(&mlp(&[32, 40, 24, 6]), &PlanOptions::new(t, 0.9)).unwrap();
        let mut net: Network<f64> = build(
            &plan,
            &BuildOptions {
                model_seed: 9,
                mask_seed: 2,
                ..relu_opts()
            },
        )
        .unwrap();
        let (a, ma) = net.predict(&x, ExecPath::MaskedDense).unwrap();
        let (b, mb) = net.predict(&x, ExecPath::Compressed).unwrap();
        assert!(max_rel(&a, &b) <= 1e-10, "{t}");
        assert_eq!(ma, mb);
    }
    let cx = random(&[2, 3, 8, 8], 7);
    let plan = plan_network(
        &small_cnn(),
        &PlanOptions::new(Transform::SparseFactorized, 0.8).keep_boundary_dense(false),
    )
    .unwrap();
    let mut net: Network<f64> = build(&plan, &relu_opts()).unwrap();
    let (a, _) = net.predict(&cx, ExecPath::MaskedDense).unwrap();
    let (b, _) = net.predict(&cx, ExecPath::Compressed).unwrap();
    assert!(max_rel(&a, &b) <= 1e-10);
}

#[test]
fn zero_input_bias_free_relu_net_gives_zero_logits() {
    let specs: Vec<LayerSpec> = mlp(&[8, 16, 16, 3])
        .into_iter()
        .map(|s| s.with_bias(false))
        .collect();
    for t in Transform::SPARSE_FAMILY {
        let po = PlanOptions::new(t, 0.5).nonlinearity(Nonlinearity::Relu);
        let mut net: Network<f64> =
            build(&plan_network(&specs, &po).unwrap(), &relu_opts()).unwrap();
        let (y, _) = net
            .predict(&Tensor::zeros(&[4, 8]), ExecPath::MaskedDense)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0), "{t}");
    }
}

#[test]
fn registry_names_and_masks() {
    let plan = plan_network(
        &mlp(&[16, 32, 8]),
        &PlanOptions::new(Transform::SparseFactorized, 0.5),
    )
    .unwrap();
    let net: Network<f32> = build(&plan, &BuildOptions::default()).unwrap();
    let names: Vec<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "layer0.main.weight",
            "layer0.out.bias",
            "layer0.out.bn.gamma",
            "layer0.out.bn.beta",
            "layer1.main.weight",
            "layer1.out.bias",
        ]
    );
    let plan = plan_network(
        &mlp(&[16, 32, 32, 8]),
        &PlanOptions::new(Transform::SparseFactorized, 0.5),
    )
    .unwrap();
    let net: Network<f32> = build(&plan, &BuildOptions::default()).unwrap();
    let masks: Vec<(&str, usize)> = net.masks().map(|(n, m)| (n, m.active_count())).collect();
    let w = &plan.layers[1].plan.weights;
    assert_eq!(
        masks,
        [
            ("layer1.factor_u.weight", w[0].active as usize),
            ("layer1.factor_v.weight", w[1].active as usize)
        ]
    );
    assert!(net.param("layer1.factor_u.bn.gamma").is_some());
    assert!(net.norms().iter().any(|n| n.name == "layer1.factor_u.bn"));
    for p in net.params() {
        if let Some(m) = &p.mask {
            for (i, &v) in p.value.data().iter().enumerate() {
                assert!(
                    m.is_active(i) || v == 0.0,
                    "{} has a live inactive weight",
                    p.name
                );
            }
        }
    }
}

#[test]
fn search_space_matches_planner_cardinality() {
    for t in Transform::SPARSE_FAMILY {
        for s in [0.5, 0.75, 0.9] {
            let plan = plan_network(&mlp(&[24, 64, 64, 10]), &PlanOptions::new(t, s)).unwrap();
            let net: Network<f32> = build(&plan, &BuildOptions::default()).unwrap();
            assert_eq!(net.search_space(), plan.total_cardinality(), "{t} s={s}");
        }
    }
}

#[test]
fn builds_are_seeded() {
    let plan = plan_network(
        &mlp(&[16, 32, 8]),
        &PlanOptions::new(Transform::SparseWide, 0.75),
    )
    .unwrap();
    let a: Network<f32> = build(
        &plan,
        &BuildOptions {
            model_seed: 1,
            mask_seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let b: Network<f32> = build(
        &plan,
        &BuildOptions {
            model_seed: 1,
            mask_seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let c: Network<f32> = build(
        &plan,
        &BuildOptions {
            model_seed: 1,
            mask_seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    for ((pa, pb), pc) in a.params().iter().zip(b.params()).zip(c.params()) {
        assert_eq!(pa.value, pb.value);
        assert_eq!(pa.mask, pb.mask);
        if pa.mask.is_some() {
            assert_ne!(pa.mask, pc.mask);
        }
    }
}

#[test]
fn input_shape_is_checked() {
    let plan = plan_network(&mlp(&[16, 8]), &PlanOptions::new(Transform::Dense, 0.0)).unwrap();
    let mut net: Network<f64> = build(&plan, &BuildOptions::default()).unwrap();
    let err = net
        .predict(&Tensor::zeros(&[2, 15]), ExecPath::MaskedDense)
        .unwrap_err();
    assert!(matches!(err, NetworkError::Input { .. }));
    assert!(net
        .predict(&Tensor::zeros(&[2, 4, 4]), ExecPath::MaskedDense)
        .is_ok());
    let err = net
        .set_param("layer0.main.weight", Tensor::zeros(&[8, 16]))
        .unwrap_err();
    assert!(matches!(err, NetworkError::ParamShape { .. }));
    assert!(matches!(
        net.set_param("nope", Tensor::zeros(&[1])),
        Err(NetworkError::UnknownParam(_))
    ));
}

#[test]
fn inconsistent_plan_is_rejected() {
    let mut plan = plan_network(
        &mlp(&[16, 8]),
        &PlanOptions::new(Transform::SparseWide, 0.5).keep_boundary_dense(false),
    )
    .unwrap();
    plan.layers[0].plan.weights[0].rows += 1;
    assert!(matches!(
        build::<f32>(&plan, &BuildOptions::default()),
        Err(NetworkError::Inconsistent { .. })
    ));
    let mut plan = plan_network(
        &mlp(&[16, 8]),
        &PlanOptions::new(Transform::SparseParallel, 0.5).keep_boundary_dense(false),
    )
    .unwrap();
    plan.layers[0].plan.weights.pop();
    assert!(matches!(
        build::<f32>(&plan, &BuildOptions::default()),
        Err(NetworkError::Inconsistent { .. })
    ));
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn execution_paths_agree_and_count_planned_macs(
        t in proptest::sample::select(Transform::SPARSE_FAMILY.to_vec()),
        s in 0.05f64..0.95,
        hidden in 8usize..40,
        seed in 0u64..1000,
    ) {
        let plan = plan_network(&mlp(&[12, hidden, hidden, 5]), &PlanOptions::new(t, s).keep_boundary_dense(false)).unwrap();
        let opts = BuildOptions { model_seed: seed, mask_seed: seed + 1, ..relu_opts() };
        let mut net: Network<f64> = build(&plan, &opts).unwrap();
        let x = random(&[4, 12], seed);
        let (a, ma) = net.predict(&x, ExecPath::MaskedDense).unwrap();
        let (b, mb) = net.predict(&x, ExecPath::Compressed).unwrap();
        proptest::prop_assert!(max_rel(&a, &b) <= 1e-10);
        proptest::prop_assert_eq!(ma, mb);
        proptest::prop_assert_eq!(ma, plan.planned_total_macs * 4);
    }
}
