#![allow(dead_code)]

use std::path::Path;

use forge_trainer::TrainConfig;
use serde_json::{json, Value};

/// Small blob-classification run: 8 features, 4 classes, MLP 8→32→32→4.
pub fn blobs_json(out: &Path, transform: &str, sparsity: f64, method: &str) -> Value {
    json!({
        "layers": [
            {"kind": "linear", "d_in": 8, "d_out": 32},
            {"kind": "linear", "d_in": 32, "d_out": 32},
            {"kind": "linear", "d_in": 32, "d_out": 4}
        ],
        "transform": transform,
        "sparsity": sparsity,
        "keep_boundary_dense": false,
        "mask": {"method": method, "delta_t": 10},
        "optimizer": {"epochs": 2, "batch_size": 16, "lr_peak": 0.05},
        "dataset": {"kind": "synthetic_blobs", "classes": 4, "features": 8, "n": 400, "seed": 3},
        "seeds": {"model": 1, "mask": 2, "data": 3},
        "output_dir": out,
        "svg": false
    })
}

pub fn config(v: Value) -> TrainConfig {
    let cfg: TrainConfig = serde_json::from_value(v).expect("test config deserializes");
    cfg.validate().expect("test config is valid");
    cfg
}

pub fn blobs(out: &Path, transform: &str, sparsity: f64, method: &str) -> TrainConfig {
    config(blobs_json(out, transform, sparsity, method))
}
