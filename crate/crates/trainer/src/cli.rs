//! The `forge` command line.
//!
//! Exit codes: 0 success, 1 validation error (arguments, config, data,
//! infeasible plan), 2 runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use forge_bench::{
    bench_spmm, emit_bench_table, render_csv, threads_from_env, BenchCase, BenchError,
};

use crate::config::parse_json;
use crate::data::DatasetDescriptor;
use crate::report::{audit, render_audit_csv, render_audit_table};
use crate::train::{evaluate_checkpoint, plan_from_config, train};
use crate::{generate_idx_task, load_config, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "forge",
    version,
    about = "Plan, train, audit and benchmark iso-FLOP sparse networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the per-layer plan of a training config.
    Plan {
        config: PathBuf,
        /// Emit the full plan as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Train, checkpoint and write reports into the config's output_dir.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the test split of a dataset descriptor.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
    },
    /// Compare the dense baseline with every sparse transform at equal MACs.
    Audit {
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Time dense-widened, masked and compressed execution of a Sparse Wide layer.
    Bench { config: PathBuf },
    /// Write a synthetic 14x14 ten-class IDX image task and its descriptor.
    SynthIdx {
        dir: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        train: usize,
        #[arg(long, default_value_t = 2_000)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = if e.is_validation() {
            EXIT_VALIDATION
        } else {
            EXIT_RUNTIME
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        let code = match e {
            BenchError::Invalid { .. } | BenchError::Plan(_) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn io_error(e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_VALIDATION,
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(parse_json(path, &text)?)
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

/// Runs one command, writing its normal output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    write!(out, "{e}").map_err(io_error)?;
                    Ok(())
                }
                _ => Err(CliError {
                    code: EXIT_VALIDATION,
                    message: e.to_string(),
                }),
            };
        }
    };
    let threads = threads_from_env()?;
    match cli.command {
        Command::Plan { config, json } => {
            let cfg = load_config(&config)?;
            let plan = plan_from_config(&cfg)?;
            if json {
                writeln!(
                    out,
                    "{}",
                    serde_json::to_string_pretty(&plan).expect("plan serializes")
                )
                .map_err(io_error)?;
            } else {
                writeln!(
                    out,
                    "{:>5} {:<18} {:>13} {:>14} {:>8} {:>10} {:>10} {:>11} {:>12}",
                    "layer",
                    "transform",
                    "planned",
                    "rounded",
                    "s_eff",
                    "active",
                    "positions",
                    "cardinality",
                    "macs"
                )
                .map_err(io_error)?;
                for (i, l) in plan.layers.iter().enumerate() {
                    let p = &l.plan;
                    writeln!(
                        out,
                        "{i:>5} {:<18} {:>13} {:>14} {:>8.4} {:>10} {:>10} {:>11} {:>12}",
                        p.transform.name(),
                        format!("{}x{}", l.planned.d_in, l.planned.d_out),
                        format!("{:?}", p.rounded_scale),
                        p.effective_sparsity,
                        p.active_weights,
                        p.total_weight_positions,
                        p.cardinality,
                        p.predicted_macs
                    )
                    .map_err(io_error)?;
                }
                writeln!(
                    out,
                    "baseline {} MACs, planned {} MACs, relative error {:.3e}",
                    plan.baseline_total_macs,
                    plan.planned_total_macs,
                    plan.relative_mac_error()
                )
                .map_err(io_error)?;
            }
        }
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let report = train(&cfg)?;
            writeln!(
                out,
                "epoch,mean_step_loss,train_loss,test_loss,test_{}",
                report.metric
            )
            .map_err(io_error)?;
            for e in &report.epochs {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    e.epoch, e.mean_step_loss, e.train_loss, e.test_loss, e.test_metric
                )
                .map_err(io_error)?;
            }
            writeln!(
                out,
                "{} steps, {} mask updates, {} cumulative forward MACs, threads={}, reports in {}",
                report.total_steps,
                report.mask_updates.len(),
                report.cumulative_training_macs,
                report.threads,
                cfg.output_dir.display()
            )
            .map_err(io_error)?;
        }
        Command::Eval {
            checkpoint,
            dataset,
        } => {
            let mut desc: DatasetDescriptor = read_json(&dataset)?;
            desc.resolve_paths(base_dir(&dataset));
            desc.validate()?;
            let metrics = evaluate_checkpoint(&checkpoint, &desc)?;
            writeln!(
                out,
                "{}",
                serde_json::to_string_pretty(&metrics).expect("metrics serialize")
            )
            .map_err(io_error)?;
        }
        Command::Audit { config, json } => {
            let cfg = load_config(&config)?;
            let rows = audit(&cfg)?;
            if json {
                writeln!(
                    out,
                    "{}",
                    serde_json::to_string_pretty(&rows).expect("rows serialize")
                )
                .map_err(io_error)?;
            } else {
                write!(out, "{}", render_audit_table(&rows)).map_err(io_error)?;
            }
            std::fs::create_dir_all(&cfg.output_dir).map_err(io_error)?;
            std::fs::write(cfg.output_dir.join("audit.csv"), render_audit_csv(&rows))
                .map_err(io_error)?;
        }
        Command::Bench { config } => {
            let mut case: BenchCase = read_json(&config)?;
            if let Some(dir) = &mut case.output_dir {
                if dir.is_relative() {
                    *dir = base_dir(&config).join(&*dir);
                }
            }
            let rows = bench_spmm(&case)?;
            write!(out, "{}", render_csv(&rows)).map_err(io_error)?;
            writeln!(out, "# threads={threads}").map_err(io_error)?;
            if let Some(dir) = &case.output_dir {
                emit_bench_table(&case, &rows, threads, dir)?;
            }
        }
        Command::SynthIdx {
            dir,
            train,
            test,
            seed,
        } => {
            if train < 2 || test < 1 {
                return Err(CliError {
                    code: EXIT_VALIDATION,
                    message: "synth-idx needs at least 2 training and 1 test example".into(),
                });
            }
            let desc = generate_idx_task(&dir, train, test, seed)?;
            let path = dir.join("dataset.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&desc).expect("descriptor serializes"),
            )
            .map_err(io_error)?;
            writeln!(out, "wrote {}", path.display()).map_err(io_error)?;
        }
    }
    Ok(())
}

/// Process entry: runs, prints errors to stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(args, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("forge: {}", e.message.trim_end());
            e.code
        }
    }
}
