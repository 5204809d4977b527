use std::fmt::Write as _;
use std::path::Path;

use forge_planner::{plan_network, redistribute_sparsity, Transform, DEFAULT_TOLERANCE};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::train::{RunReport, StepRecord};
use crate::{Result, TrainError};

pub const METRICS_HEADER: &str = "step,loss,lr,macs";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHART_FILE: &str = "loss_vs_macs.svg";

pub fn render_metrics_csv(steps: &[StepRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for s in steps {
        let _ = writeln!(out, "{},{},{},{}", s.step, s.loss, s.lr, s.macs);
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(TrainError::io(path))
}

/// Writes `metrics.csv`, `summary.json` and optionally the SVG chart.
pub fn write_run_reports(dir: &Path, report: &RunReport, svg: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(TrainError::io(dir))?;
    write(&dir.join(METRICS_FILE), &render_metrics_csv(&report.steps))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(&dir.join(SUMMARY_FILE), &json)?;
    if svg {
        write(&dir.join(CHART_FILE), &render_svg(report))?;
    }
    Ok(())
}

/// Training loss against cumulative forward MACs.
pub fn render_svg(report: &RunReport) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let mut cum = 0u64;
    let points: Vec<(f64, f64)> = report
        .steps
        .iter()
        .map(|s| {
            cum += s.macs;
            (cum as f64, s.loss)
        })
        .collect();
    let max_x = points.last().map_or(1.0, |p| p.0).max(1.0);
    let max_y = points.iter().map(|p| p.1).fold(f64::MIN_POSITIVE, f64::max);
    let mut path = String::new();
    for (i, (x, y)) in points.iter().enumerate() {
        let px = pad + x / max_x * (w - 2.0 * pad);
        let py = h - pad - y / max_y * (h - 2.0 * pad);
        let _ = write!(path, "{}{px:.1},{py:.1} ", if i == 0 { "M" } else { "L" });
    }
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="100%" height="100%" fill="white"/>
<line x1="{pad}" y1="{yb}" x2="{xr}" y2="{yb}" stroke="black"/>
<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{yb}" stroke="black"/>
<text x="{cx}" y="{ty}" text-anchor="middle" font-size="12">cumulative forward MACs (max {max_x:.3e})</text>
<text x="14" y="{cy}" font-size="12" transform="rotate(-90 14 {cy})" text-anchor="middle">training loss (max {max_y:.3})</text>
<path d="{path}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>
</svg>
"##,
        yb = h - pad,
        xr = w - pad,
        cx = w / 2.0,
        ty = h - 12.0,
        cy = h / 2.0,
    )
}

/// One network-level variant at the configured sparsity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub transform: Transform,
    pub sparsity: f64,
    pub baseline_macs: u64,
    pub planned_macs: u64,
    pub relative_error: f64,
    pub pass: bool,
    pub cardinality: u64,
    pub active_weights: u64,
    pub total_positions: u64,
    /// Uniform sparsity re-solved over masked tensors, when boundary layers
    /// kept dense required it.
    pub redistributed_sparsity: Option<f64>,
    pub note: String,
}

/// Dense baseline against each sparse transform at `cfg.sparsity`.
pub fn audit(cfg: &TrainConfig) -> Result<Vec<AuditRow>> {
    let specs = cfg.layer_specs();
    let mut rows = Vec::new();
    let variants = [Transform::Dense]
        .into_iter()
        .chain(Transform::SPARSE_FAMILY)
        .collect::<Vec<_>>();
    for t in variants {
        let mut opts = cfg.plan_options();
        opts.transform = t;
        let sparsity = if t == Transform::Dense {
            0.0
        } else {
            cfg.sparsity
        };
        opts.sparsity = sparsity;
        let mut plan = plan_network(&specs, &opts)?;
        let mut note = String::new();
        if plan.planned_total_macs != plan.baseline_total_macs
            && plan
                .layers
                .iter()
                .any(|l| l.plan.weights.iter().any(|w| w.masked))
        {
            match redistribute_sparsity(&plan, plan.baseline_total_macs) {
                Ok(p) => plan = p,
                Err(e) => note = e.to_string(),
            }
        }
        let rel = plan.relative_mac_error();
        rows.push(AuditRow {
            transform: t,
            sparsity,
            baseline_macs: plan.baseline_total_macs,
            planned_macs: plan.planned_total_macs,
            relative_error: rel,
            pass: rel <= DEFAULT_TOLERANCE,
            cardinality: plan.total_cardinality(),
            active_weights: plan.layers.iter().map(|l| l.plan.active_weights).sum(),
            total_positions: plan
                .layers
                .iter()
                .map(|l| l.plan.total_weight_positions)
                .sum(),
            redistributed_sparsity: plan.redistributed_sparsity,
            note,
        });
    }
    Ok(rows)
}

pub fn render_audit_table(rows: &[AuditRow]) -> String {
    let mut out = format!(
        "{:<18} {:>8} {:>14} {:>14} {:>10} {:>5} {:>12} {:>12} {:>12} {:>9}\n",
        "transform",
        "s",
        "baseline_macs",
        "planned_macs",
        "rel_err",
        "ok",
        "cardinality",
        "active",
        "positions",
        "s_redist"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<18} {:>8.4} {:>14} {:>14} {:>10.2e} {:>5} {:>12} {:>12} {:>12} {:>9}{}",
            r.transform.name(),
            r.sparsity,
            r.baseline_macs,
            r.planned_macs,
            r.relative_error,
            if r.pass { "yes" } else { "no" },
            r.cardinality,
            r.active_weights,
            r.total_positions,
            r.redistributed_sparsity
                .map_or("-".to_string(), |s| format!("{s:.4}")),
            if r.note.is_empty() {
                String::new()
            } else {
                format!("  ({})", r.note)
            },
        );
    }
    out
}

pub fn render_audit_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from(
        "transform,sparsity,baseline_macs,planned_macs,relative_error,pass,cardinality,active_weights,total_positions,redistributed_sparsity\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.transform.name(),
            r.sparsity,
            r.baseline_macs,
            r.planned_macs,
            r.relative_error,
            r.pass,
            r.cardinality,
            r.active_weights,
            r.total_positions,
            r.redistributed_sparsity
                .map_or(String::new(), |s| s.to_string()),
        );
    }
    out
}
