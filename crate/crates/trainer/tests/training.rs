mod common;

use std::collections::BTreeMap;
use std::path::Path;

use forge_network::{build, BuildOptions, Network};
use forge_planner::Transform;
use forge_trainer::report::{render_audit_csv, render_audit_table, METRICS_HEADER};
use forge_trainer::{
    audit, load_checkpoint, plan_from_config, train, FineTune, Record, RunReport, TrainError,
};
use serde_json::json;

fn checkpoint_masks(dir: &Path) -> BTreeMap<String, Vec<u32>> {
    load_checkpoint(&dir.join("checkpoint.sift"))
        .unwrap()
        .records
        .into_iter()
        .filter_map(|(n, r)| match r {
            Record::Mask(m) => Some((n.replace(".mask", ".weight"), m.active().to_vec())),
            Record::Tensor(_) => None,
        })
        .collect()
}

fn net_masks(net: &Network<f32>) -> BTreeMap<String, Vec<u32>> {
    net.masks()
        .map(|(n, m)| (n.to_string(), m.active().to_vec()))
        .collect()
}

#[test]
fn one_epoch_lowers_training_loss_for_most_seeds() {
    let mut lower = 0;
    for seed in 0..3u64 {
        let dir = tempfile::tempdir().unwrap();
        let mut v = common::blobs_json(dir.path(), "dense", 0.0, "static");
        v["optimizer"]["epochs"] = json!(1);
        v["seeds"] = json!({"model": seed, "mask": seed, "data": seed});
        let report = train(&common::config(v)).unwrap();
        if report.final_train_loss() < report.initial_train_loss {
            lower += 1;
        }
    }
    assert!(lower >= 2, "{lower}/3 seeds lowered the loss");
}

#[test]
fn static_schedule_keeps_the_initial_mask_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::blobs(dir.path(), "sparse_factorized", 0.8, "static");
    let report = train(&cfg).unwrap();
    assert!(report.mask_updates.is_empty());
    assert!(report.steps.iter().all(|s| s.drop_fraction == 0.0));
    let opts = BuildOptions {
        model_seed: cfg.seeds.model,
        mask_seed: cfg.seeds.mask,
        ..BuildOptions::default()
    };
    let initial: Network<f32> = build(&plan_from_config(&cfg).unwrap(), &opts).unwrap();
    let initial = net_masks(&initial);
    assert!(!initial.is_empty());
    assert_eq!(checkpoint_masks(dir.path()), initial);
}

#[test]
fn rigl_logs_seven_updates_over_a_thousand_steps() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = common::blobs_json(dir.path(), "sparse_wide", 0.75, "rigl");
    // 1000 train + 250 test examples, batch 10: 100 steps per epoch.
    v["dataset"]["n"] = json!(1250);
    v["optimizer"]["batch_size"] = json!(10);
    v["optimizer"]["epochs"] = json!(10);
    v["mask"]["delta_t"] = json!(100);
    let report = train(&common::config(v)).unwrap();
    assert_eq!(report.total_steps, 1000);
    let steps: Vec<u64> = report.mask_updates.iter().map(|u| u.step).collect();
    assert_eq!(steps, vec![100, 200, 300, 400, 500, 600, 700]);
    for u in &report.mask_updates {
        assert_eq!(u.dropped, u.grown);
        assert!(u.dropped > 0);
        assert!((report.steps[u.step as usize].drop_fraction - u.drop_fraction).abs() == 0.0);
    }
    let first = &report.mask_updates[0];
    let expect = 0.15 * (1.0 + (std::f64::consts::PI * 100.0 / 750.0).cos());
    assert!((first.drop_fraction - expect).abs() < 1e-12);
    assert!(report.active_params < report.total_params);
}

#[test]
fn fine_tune_modes() {
    let pre = tempfile::tempdir().unwrap();
    let sparse = common::blobs(pre.path(), "sparse_wide", 0.9, "set");
    let pre_report = train(&sparse).unwrap();
    assert!(pre_report.active_params < pre_report.total_params);
    let pre_masks = checkpoint_masks(pre.path());
    let ckpt = pre.path().join("checkpoint.sift");

    let dense_dir = tempfile::tempdir().unwrap();
    let mut v = common::blobs_json(dense_dir.path(), "sparse_wide", 0.9, "set");
    v["fine_tune"] = json!("densify");
    v["init_checkpoint"] = json!(ckpt);
    v["optimizer"]["epochs"] = json!(1);
    let report = train(&common::config(v)).unwrap();
    assert_eq!(report.fine_tune, FineTune::Densify);
    assert_eq!(report.active_params, report.total_params);
    assert!(report.mask_updates.is_empty());
    assert!(checkpoint_masks(dense_dir.path())
        .values()
        .all(|a| !a.is_empty()));
    let densified = load_checkpoint(&dense_dir.path().join("checkpoint.sift")).unwrap();
    for (_, r) in &densified.records {
        if let Record::Mask(m) = r {
            assert!(m.is_dense());
        }
    }

    let sparse_dir = tempfile::tempdir().unwrap();
    let mut v = common::blobs_json(sparse_dir.path(), "sparse_wide", 0.9, "set");
    v["fine_tune"] = json!("sparse");
    v["init_checkpoint"] = json!(ckpt);
    v["optimizer"]["epochs"] = json!(1);
    let report = train(&common::config(v)).unwrap();
    assert!(report.mask_updates.is_empty());
    assert_eq!(report.active_params, pre_report.active_params);
    assert_eq!(checkpoint_masks(sparse_dir.path()), pre_masks);
}

fn report_files(dir: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let read = |f: &str| std::fs::read(dir.join(f)).unwrap();
    (
        read("summary.json"),
        read("metrics.csv"),
        read("checkpoint.sift"),
    )
}

#[test]
fn identical_configs_give_identical_report_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for t in ["sparse_wide", "sparse_parallel"] {
        train(&common::blobs(a.path(), t, 0.75, "rigl")).unwrap();
        train(&common::blobs(b.path(), t, 0.75, "rigl")).unwrap();
        assert_eq!(report_files(a.path()), report_files(b.path()), "{t}");
    }
    let c = tempfile::tempdir().unwrap();
    let mut v = common::blobs_json(c.path(), "sparse_parallel", 0.75, "rigl");
    v["seeds"]["mask"] = json!(99);
    train(&common::config(v)).unwrap();
    assert_ne!(report_files(a.path()).0, report_files(c.path()).0);
}

fn run(transform: &str, sparsity: f64) -> RunReport {
    let dir = tempfile::tempdir().unwrap();
    train(&common::blobs(dir.path(), transform, sparsity, "rigl")).unwrap()
}

#[test]
fn cumulative_macs_match_dense_within_two_percent() {
    let dense = run("dense", 0.0);
    assert_eq!(dense.planned_macs, dense.baseline_macs);
    for t in [
        "sparse_wide",
        "sparse_parallel",
        "sparse_factorized",
        "sparse_doped",
    ] {
        for s in [0.5, 0.75, 0.9] {
            let r = run(t, s);
            assert_eq!(r.total_steps, dense.total_steps);
            let rel = (r.cumulative_training_macs as f64 - dense.cumulative_training_macs as f64)
                .abs()
                / dense.cumulative_training_macs as f64;
            assert!(rel <= 0.02, "{t} s={s}: {rel}");
            assert_eq!(r.measured_macs, r.planned_macs, "{t} s={s}");
            for l in &r.layers {
                assert_eq!(l.measured_macs, l.predicted_macs);
            }
            assert_eq!(r.backward_macs_estimate, 2 * r.cumulative_training_macs);
        }
    }
}

#[test]
fn metrics_csv_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = common::blobs_json(dir.path(), "sparse_doped", 0.5, "rigl");
    v["svg"] = json!(true);
    let report = train(&common::config(v)).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,lr,macs"));
    assert_eq!(METRICS_HEADER, "step,loss,lr,macs");
    assert_eq!(lines.count() as u64, report.total_steps);
    let svg = std::fs::read_to_string(dir.path().join("loss_vs_macs.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<path d=\"M"));
    let lrs: Vec<f64> = report.steps.iter().map(|s| s.lr).collect();
    assert_eq!(lrs[0], 0.05);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

/// Sparse-search-space size of one layer from its rounded scales.
fn cardinality_oracle(t: Transform, d_in: u64, d_out: u64, scale: &[usize]) -> u64 {
    match t {
        Transform::Dense => d_in * d_out,
        Transform::SparseWide => scale[0] as u64 * scale[1] as u64,
        Transform::SparseParallel => scale[0] as u64 * d_in * d_out,
        Transform::SparseFactorized => scale[0] as u64 * (d_in + d_out),
        Transform::SparseDoped => d_in * d_out,
        other => panic!("no oracle for {other}"),
    }
}

#[test]
fn summary_json_carries_per_layer_cardinality() {
    for t in [
        "sparse_wide",
        "sparse_parallel",
        "sparse_factorized",
        "sparse_doped",
    ] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = common::blobs(dir.path(), t, 0.75, "rigl");
        train(&cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
        let summary: serde_json::Value = serde_json::from_str(&text).unwrap();
        let layers = summary["layers"].as_array().unwrap();
        assert_eq!(layers.len(), 3);
        for (l, spec) in layers.iter().zip(&cfg.layers) {
            let transform: Transform = serde_json::from_value(l["transform"].clone()).unwrap();
            let scale: Vec<usize> = serde_json::from_value(l["rounded_scale"].clone()).unwrap();
            let want = cardinality_oracle(transform, spec.d_in as u64, spec.d_out as u64, &scale);
            assert_eq!(l["cardinality"].as_u64().unwrap(), want, "{t}");
        }
    }
}

#[test]
fn audit_rows_are_iso_flop() {
    let dir = tempfile::tempdir().unwrap();
    for keep in [false, true] {
        let mut v = common::blobs_json(dir.path(), "sparse_wide", 0.75, "rigl");
        v["keep_boundary_dense"] = json!(keep);
        v["layers"] = json!([
            {"kind": "linear", "d_in": 64, "d_out": 512},
            {"kind": "linear", "d_in": 512, "d_out": 512},
            {"kind": "linear", "d_in": 512, "d_out": 10}
        ]);
        let rows = audit(&common::config(v)).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].transform, Transform::Dense);
        for r in &rows {
            assert!(
                r.relative_error <= 0.01,
                "keep={keep} {}: {}",
                r.transform,
                r.relative_error
            );
            assert!(r.pass);
        }
        assert_eq!(render_audit_csv(&rows).lines().count(), 6);
        assert!(render_audit_table(&rows).contains("sparse_doped"));
        if keep {
            assert!(rows[1..].iter().any(|r| r.redistributed_sparsity.is_some()));
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_its_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = common::blobs_json(dir.path(), "dense", 0.0, "static");
    v["optimizer"]["lr_peak"] = json!(1e30);
    v["hidden_activation"] = json!("relu");
    match train(&common::config(v)).unwrap_err() {
        TrainError::NonFiniteLoss { step } => assert!(step >= 1),
        other => panic!("expected a non-finite loss, got {other}"),
    }
}

#[test]
fn regression_runs_report_mse() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = common::blobs_json(dir.path(), "sparse_wide", 0.5, "rigl");
    v["dataset"] =
        json!({"kind": "synthetic_teacher", "inputs": 8, "outputs": 4, "n": 300, "seed": 2});
    v["optimizer"]["lr_peak"] = json!(0.01);
    let report = train(&common::config(v)).unwrap();
    assert_eq!(report.metric, "mse");
    let last = report.epochs.last().unwrap();
    assert!(last.test_metric.is_finite() && last.test_metric >= 0.0);
}
