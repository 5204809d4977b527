//! Microbenchmarks of one Sparse Wide layer across sparsity levels.
//!
//! For each sparsity the layer is widened to its iso-FLOP shape and run three
//! ways: as a fully dense widened layer (no sparsity support), through the
//! engine's masked path, and through compressed rows. MAC counts come from
//! the engine's counters and are checked exactly; wall-clock times are only
//! reported.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use forge_masks::SparseMask;
use forge_planner::{plan_sparse_wide, LayerSpec, Transform};
use forge_tensor::{csr_matmul, CompressedRows, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CSV_HEADER: &str = "sparsity,dense_widened_ns,masked_dense_ns,compressed_ns,speedup";
pub const MIN_REPETITIONS: usize = 10;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Plan(#[from] forge_planner::PlanError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] forge_masks::MaskError),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

fn invalid(field: &str, reason: impl Into<String>) -> BenchError {
    BenchError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

fn default_transform() -> Transform {
    Transform::SparseWide
}

fn default_reps() -> usize {
    MIN_REPETITIONS
}

fn default_warmup() -> usize {
    2
}

fn default_quantum() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCase {
    pub d_in: usize,
    pub d_out: usize,
    pub batch: usize,
    pub sparsities: Vec<f64>,
    #[serde(default = "default_transform")]
    pub transform: Transform,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_quantum")]
    pub quantum: usize,
    /// Where `forge bench` writes its tables.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl BenchCase {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 {
            return Err(invalid("d_in", "dims must be >= 1"));
        }
        if self.batch == 0 {
            return Err(invalid("batch", "must be >= 1"));
        }
        if self.sparsities.is_empty() {
            return Err(invalid("sparsities", "at least one value is required"));
        }
        if let Some(s) = self.sparsities.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(invalid("sparsities", format!("{s} is outside [0, 1)")));
        }
        if self.transform != Transform::SparseWide {
            return Err(invalid(
                "transform",
                format!("only sparse_wide is benchmarked, got {}", self.transform),
            ));
        }
        if self.repetitions < MIN_REPETITIONS {
            return Err(invalid(
                "repetitions",
                format!("must be >= {MIN_REPETITIONS}, got {}", self.repetitions),
            ));
        }
        if self.quantum == 0 {
            return Err(invalid("quantum", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sparsity: f64,
    pub effective_sparsity: f64,
    pub widened_in: usize,
    pub widened_out: usize,
    pub active: u64,
    pub dense_original_macs: u64,
    pub dense_widened_macs: u64,
    pub masked_dense_macs: u64,
    pub compressed_macs: u64,
    /// Original un-widened dense layer: the ideal iso-FLOP time.
    pub dense_original_ns: u64,
    pub dense_widened_ns: u64,
    pub masked_dense_ns: u64,
    pub compressed_ns: u64,
    /// `dense_widened_ns / compressed_ns`.
    pub speedup: f64,
    pub compressed_macs_per_ns: f64,
}

impl BenchRow {
    /// `dense_widened / compressed == 1/(1 - s_eff)`, checked by
    /// cross-multiplication in integers.
    pub fn mac_ratio_is_exact(&self) -> bool {
        let positions = self.widened_in as u128 * self.widened_out as u128;
        self.dense_widened_macs as u128 * self.active as u128
            == self.compressed_macs as u128 * positions
    }
}

/// Median wall-clock nanoseconds of `f` over `reps` runs after `warmup`.
pub fn median_ns(warmup: usize, reps: usize, mut f: impl FnMut()) -> u64 {
    for _ in 0..warmup {
        f();
    }
    let mut times: Vec<u64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as u64
        })
        .collect();
    times.sort_unstable();
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Forward MACs and one output of `x · w` via the tape counter.
fn dense_macs(x: &Tensor<f32>, w: &Tensor<f32>) -> Result<u64> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    tape.matmul(xv, wv)?;
    Ok(tape.macs())
}

fn masked_forward(x: &Tensor<f32>, w: &Tensor<f32>, mask: &Arc<SparseMask>) -> Result<u64> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    tape.masked_linear(xv, wv, mask, None, false)?;
    Ok(tape.macs())
}

fn dense_forward(x: &Tensor<f32>, w: &Tensor<f32>) -> Result<()> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    tape.matmul(xv, wv)?;
    Ok(())
}

/// Runs every sparsity of `case`.
pub fn bench_spmm(case: &BenchCase) -> Result<Vec<BenchRow>> {
    case.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let spec = LayerSpec::linear(case.d_in, case.d_out);
    let x0 = random(&[case.batch, case.d_in], &mut rng);
    let w0 = random(&[case.d_in, case.d_out], &mut rng);
    let dense_original_macs = dense_macs(&x0, &w0)?;
    let dense_original_ns = median_ns(case.warmup, case.repetitions, || {
        dense_forward(&x0, &w0).expect("shapes fixed above");
    });
    let mut rows = Vec::with_capacity(case.sparsities.len());
    for (i, &s) in case.sparsities.iter().enumerate() {
        let plan = plan_sparse_wide(&spec, s, case.quantum)?;
        let (r, c) = (plan.rounded_scale[0], plan.rounded_scale[1]);
        let active = plan.weights[0].active;
        let x = random(&[case.batch, r], &mut rng);
        let mut w = random(&[r, c], &mut rng);
        let mask = SparseMask::random_with_count(
            &[r, c],
            active as usize,
            case.seed.wrapping_add(i as u64),
        )?;
        mask.apply(w.data_mut())?;
        let mask = Arc::new(mask);
        let compressed = CompressedRows::from_masked(&w, &mask)?;

        let dense_widened_macs = dense_macs(&x, &w)?;
        let masked_dense_macs = masked_forward(&x, &w, &mask)?;
        let (_, compressed_macs) = csr_matmul(&x, &compressed)?;

        let dense_widened_ns = median_ns(case.warmup, case.repetitions, || {
            dense_forward(&x, &w).expect("shapes fixed above");
        });
        let masked_dense_ns = median_ns(case.warmup, case.repetitions, || {
            masked_forward(&x, &w, &mask).expect("shapes fixed above");
        });
        let compressed_ns = median_ns(case.warmup, case.repetitions, || {
            csr_matmul(&x, &compressed).expect("shapes fixed above");
        });
        rows.push(BenchRow {
            sparsity: s,
            effective_sparsity: plan.effective_sparsity,
            widened_in: r,
            widened_out: c,
            active,
            dense_original_macs,
            dense_widened_macs,
            masked_dense_macs,
            compressed_macs,
            dense_original_ns,
            dense_widened_ns,
            masked_dense_ns,
            compressed_ns,
            speedup: dense_widened_ns as f64 / compressed_ns.max(1) as f64,
            compressed_macs_per_ns: compressed_macs as f64 / compressed_ns.max(1) as f64,
        });
    }
    Ok(rows)
}

/// Whether the dense-widened time grows with the widened problem size.
pub fn dense_path_monotone(rows: &[BenchRow]) -> bool {
    let mut sorted: Vec<&BenchRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.dense_widened_macs);
    sorted
        .windows(2)
        .all(|w| w[0].dense_widened_ns <= w[1].dense_widened_ns)
}

pub fn render_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.sparsity, r.dense_widened_ns, r.masked_dense_ns, r.compressed_ns, r.speedup
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Thread budget the run was labelled with.
    pub threads: usize,
    pub case: BenchCase,
    pub rows: Vec<BenchRow>,
    pub mac_ratios_exact: bool,
    pub dense_path_monotone: bool,
}

/// Writes `bench.csv` and `bench.json` into `dir`.
pub fn emit_bench_table(
    case: &BenchCase,
    rows: &[BenchRow],
    threads: usize,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BenchError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let csv = dir.join("bench.csv");
    std::fs::write(&csv, render_csv(rows)).map_err(io(&csv))?;
    let report = BenchReport {
        threads,
        case: case.clone(),
        rows: rows.to_vec(),
        mac_ratios_exact: rows.iter().all(BenchRow::mac_ratio_is_exact),
        dense_path_monotone: dense_path_monotone(rows),
    };
    let json = dir.join("bench.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&json, text).map_err(io(&json))?;
    Ok((csv, json))
}

/// Thread budget from `FORGE_THREADS` (default 1). Execution itself is
/// single-threaded; the value labels results.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("FORGE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(invalid(
                "FORGE_THREADS",
                format!("expected a positive integer, got `{v}`"),
            )),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        let mut calls = 0;
        median_ns(3, 11, || calls += 1);
        assert_eq!(calls, 14);
    }

    #[test]
    fn rejects_few_repetitions() {
        let case = BenchCase {
            d_in: 8,
            d_out: 8,
            batch: 2,
            sparsities: vec![0.5],
            transform: Transform::SparseWide,
            repetitions: 9,
            warmup: 0,
            seed: 0,
            quantum: 1,
            output_dir: None,
        };
        assert!(matches!(case.validate(), Err(BenchError::Invalid { .. })));
    }

    #[test]
    fn csv_header() {
        assert!(render_csv(&[])
            .starts_with("sparsity,dense_widened_ns,masked_dense_ns,compressed_ns,speedup\n"));
    }
}
