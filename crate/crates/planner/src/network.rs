//! Network-level planning: shared widening, dense boundary layers and
//! sparsity redistribution.

use serde::{Deserialize, Serialize};

use crate::layer::{LayerKind, LayerSpec};
use crate::transform::{
    low_rank_on, plan_dense, plan_sparse_doped, plan_sparse_factorized, plan_sparse_parallel,
    round_to_quantum, sparse_wide_on, widening_factor, Nonlinearity, Transform, TransformPlan,
};
use crate::{PlanError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanOptions {
    pub transform: Transform,
    pub sparsity: f64,
    #[serde(default = "default_quantum")]
    pub quantum: usize,
    #[serde(default = "default_true")]
    pub keep_boundary_dense: bool,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

fn default_quantum() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl PlanOptions {
    pub fn new(transform: Transform, sparsity: f64) -> Self {
        Self {
            transform,
            sparsity,
            quantum: 1,
            keep_boundary_dense: true,
            nonlinearity: Nonlinearity::default(),
        }
    }

    pub fn keep_boundary_dense(mut self, keep: bool) -> Self {
        self.keep_boundary_dense = keep;
        self
    }

    pub fn quantum(mut self, quantum: usize) -> Self {
        self.quantum = quantum;
        self
    }

    pub fn nonlinearity(mut self, nonlinearity: Nonlinearity) -> Self {
        self.nonlinearity = nonlinearity;
        self
    }
}

/// One layer of a network plan: the original dense layer, the layer that is
/// actually executed (widened dims) and the transformation applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedLayer {
    pub spec: LayerSpec,
    pub planned: LayerSpec,
    pub plan: TransformPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub transform: Transform,
    pub nominal_sparsity: f64,
    pub layers: Vec<PlannedLayer>,
    pub shared_widening: Option<f64>,
    pub baseline_total_macs: u64,
    pub planned_total_macs: u64,
    pub redistributed_sparsity: Option<f64>,
}

impl NetworkPlan {
    pub fn total_cardinality(&self) -> u64 {
        self.layers.iter().map(|l| l.plan.cardinality).sum()
    }

    pub fn relative_mac_error(&self) -> f64 {
        self.planned_total_macs.abs_diff(self.baseline_total_macs) as f64
            / self.baseline_total_macs.max(1) as f64
    }
}

/// Input width a layer receives from its predecessor, flattening spatial
/// maps when a linear layer follows a convolution.
fn chained_width(
    prev: &LayerSpec,
    cur: &LayerSpec,
    prev_out: usize,
    layer: usize,
) -> Result<usize> {
    match (prev.kind, cur.kind) {
        (_, LayerKind::Linear) => Ok(prev_out * prev.out_h * prev.out_w),
        (LayerKind::Linear, _) => Err(PlanError::InvalidSpec(format!(
            "layer {layer}: convolution cannot follow a linear layer"
        ))),
        _ => Ok(prev_out),
    }
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    for (i, pair) in specs.windows(2).enumerate() {
        let (prev, cur) = (&pair[0], &pair[1]);
        let expected = chained_width(prev, cur, prev.d_out, i + 1)?;
        if cur.d_in != expected {
            return Err(PlanError::DimensionMismatch {
                layer: i + 1,
                expected,
                found: cur.d_in,
            });
        }
        if cur.is_conv() {
            let fits = |size: usize, k: usize| {
                (size + 2 * cur.padding)
                    .checked_sub(k)
                    .map(|r| r / cur.stride + 1)
            };
            let (oh, ow) = (
                fits(prev.out_h, cur.kernel_h),
                fits(prev.out_w, cur.kernel_w),
            );
            if oh != Some(cur.out_h) || ow != Some(cur.out_w) {
                return Err(PlanError::InvalidSpec(format!(
                    "layer {}: output {}x{} inconsistent with input {}x{}",
                    i + 1,
                    cur.out_h,
                    cur.out_w,
                    prev.out_h,
                    prev.out_w
                )));
            }
        }
    }
    Ok(())
}

/// Applies one transformation to every layer of a network.
///
/// Widening transforms propagate widened feature dims through the chain;
/// the network's input width and output width never change. Boundary
/// layers stay dense when `keep_boundary_dense` is set and pay for their
/// widened side in extra MACs, which [`redistribute_sparsity`] recovers.
pub fn plan_network(specs: &[LayerSpec], opts: &PlanOptions) -> Result<NetworkPlan> {
    if specs.is_empty() {
        return Err(PlanError::EmptyNetwork);
    }
    if !(0.0..1.0).contains(&opts.sparsity) {
        return Err(PlanError::InvalidSparsity(opts.sparsity));
    }
    if opts.quantum == 0 {
        return Err(PlanError::InvalidQuantum);
    }
    for spec in specs {
        spec.validate()?;
    }
    check_chain(specs)?;

    let s = opts.sparsity;
    let q = opts.quantum;
    let k = if opts.transform.widens() {
        widening_factor(s)
    } else {
        1.0
    };
    let last = specs.len() - 1;
    let mut layers: Vec<PlannedLayer> = Vec::with_capacity(specs.len());

    for (i, spec) in specs.iter().enumerate() {
        let mut planned = spec.clone();
        if opts.transform.widens() {
            if i > 0 {
                let prev = &layers[i - 1];
                planned.d_in = chained_width(&prev.planned, spec, prev.planned.d_out, i)?;
            }
            if i != last {
                planned.d_out = match (spec.kind, opts.transform) {
                    (LayerKind::DepthwiseConv2d, Transform::SparseWide) => {
                        round_to_quantum(spec.d_out as f64 / (1.0 - s), q).max(q)
                    }
                    (LayerKind::DepthwiseConv2d, _) => planned.d_in * (spec.d_out / spec.d_in),
                    _ => round_to_quantum(k * spec.d_out as f64, q).max(q),
                };
            }
            if spec.kind == LayerKind::DepthwiseConv2d && planned.d_out % planned.d_in != 0 {
                return Err(PlanError::DimensionMismatch {
                    layer: i,
                    expected: planned.d_in * planned.d_out.div_ceil(planned.d_in),
                    found: planned.d_out,
                });
            }
        }

        let plan = if spec.is_boundary() && opts.keep_boundary_dense {
            plan_dense(&planned)?
        } else {
            match opts.transform {
                Transform::Dense => plan_dense(spec)?,
                Transform::SparseWide => {
                    let scale = if spec.kind == LayerKind::DepthwiseConv2d {
                        1.0 / (1.0 - s)
                    } else {
                        k
                    };
                    sparse_wide_on(spec, &planned, s, scale)?
                }
                Transform::LowRankDense if spec.kind == LayerKind::DepthwiseConv2d => {
                    plan_dense(&planned)?
                }
                Transform::LowRankDense => low_rank_on(spec, &planned, k)?,
                Transform::SparseParallel => plan_sparse_parallel(spec, s)?,
                Transform::SparseFactorized => plan_sparse_factorized(spec, s)?,
                Transform::SparseDoped => plan_sparse_doped(spec, s)?,
            }
        }
        .with_nonlinearity(opts.nonlinearity);

        layers.push(PlannedLayer {
            spec: spec.clone(),
            planned,
            plan,
        });
    }

    let baseline_total_macs = specs.iter().map(LayerSpec::dense_macs).sum();
    let planned_total_macs = layers.iter().map(|l| l.plan.predicted_macs).sum();
    Ok(NetworkPlan {
        transform: opts.transform,
        nominal_sparsity: s,
        layers,
        shared_widening: (opts.transform == Transform::SparseWide).then_some(k),
        baseline_total_macs,
        planned_total_macs,
        redistributed_sparsity: None,
    })
}

/// Solves one uniform sparsity `s'` over every masked tensor so the whole
/// network spends `baseline_total_macs` again:
/// `Σ capacity·(1 - s') + fixed = baseline`.
pub fn redistribute_sparsity(plan: &NetworkPlan, baseline_total_macs: u64) -> Result<NetworkPlan> {
    let is_transformed = |l: &PlannedLayer| l.plan.weights.iter().any(|w| w.masked);
    if !plan.layers.iter().any(is_transformed) {
        return Err(PlanError::NothingToRedistribute);
    }
    let mut fixed = 0u64;
    let mut capacity = 0u64;
    for l in &plan.layers {
        if is_transformed(l) {
            fixed += l.plan.fixed_dense_macs();
            capacity += l.plan.masked_positions() * l.plan.spatial;
        } else {
            fixed += l.plan.predicted_macs;
        }
    }
    let solved = if baseline_total_macs > fixed {
        1.0 - (baseline_total_macs - fixed) as f64 / capacity as f64
    } else {
        1.0
    };
    if !(0.0..1.0).contains(&solved) {
        return Err(PlanError::InfeasibleRedistribution {
            fixed,
            budget: baseline_total_macs,
            capacity,
            solved,
        });
    }
    let mut out = plan.clone();
    for l in out.layers.iter_mut().filter(|l| is_transformed(l)) {
        l.plan.resparsify(solved);
    }
    out.planned_total_macs = out.layers.iter().map(|l| l.plan.predicted_macs).sum();
    out.redistributed_sparsity = Some(solved);
    Ok(out)
}
