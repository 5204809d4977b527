//! Closed-form derivations for the individual transformations.

use serde::{Deserialize, Serialize};

use crate::layer::{LayerKind, LayerSpec};
use crate::{PlanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Dense,
    SparseWide,
    SparseParallel,
    SparseFactorized,
    SparseDoped,
    LowRankDense,
}

impl Transform {
    pub const SPARSE_FAMILY: [Transform; 4] = [
        Transform::SparseWide,
        Transform::SparseParallel,
        Transform::SparseFactorized,
        Transform::SparseDoped,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Dense => "dense",
            Transform::SparseWide => "sparse_wide",
            Transform::SparseParallel => "sparse_parallel",
            Transform::SparseFactorized => "sparse_factorized",
            Transform::SparseDoped => "sparse_doped",
            Transform::LowRankDense => "low_rank_dense",
        }
    }

    /// Whether the transform changes a layer's input/output widths.
    pub fn widens(self) -> bool {
        matches!(self, Transform::SparseWide | Transform::LowRankDense)
    }
}

impl std::fmt::Display for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-linearity used inside branched/factorized transformations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    BatchnormRelu,
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRole {
    Main,
    Branch(usize),
    FactorU,
    FactorV,
    LowRankU,
    LowRankV,
    Sparse,
}

impl WeightRole {
    /// Registry segment used in parameter names.
    pub fn segment(&self) -> String {
        match self {
            WeightRole::Main => "main".into(),
            WeightRole::Branch(j) => format!("branch{j}"),
            WeightRole::FactorU => "factor_u".into(),
            WeightRole::FactorV => "factor_v".into(),
            WeightRole::LowRankU => "lowrank_u".into(),
            WeightRole::LowRankV => "lowrank_v".into(),
            WeightRole::Sparse => "sparse".into(),
        }
    }
}

/// One weight tensor of a planned layer, as a lowered `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightPlan {
    pub role: WeightRole,
    pub rows: usize,
    pub cols: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub active: u64,
    /// Carries an unstructured mask.
    pub masked: bool,
}

impl WeightPlan {
    pub fn positions(&self) -> u64 {
        self.rows as u64 * self.cols as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformPlan {
    pub transform: Transform,
    pub nominal_sparsity: f64,
    /// Unrounded scale: k_sw, k_sp, d_sf, d_sd or the low-rank rank.
    pub scale: f64,
    /// Widened dims `[d_in, d_out]`, `[k_sp]`, `[d_sf]`, `[d_sd]` or
    /// `[d_in, d_out, rank]`; empty for dense.
    pub rounded_scale: Vec<usize>,
    pub effective_sparsity: f64,
    pub predicted_macs: u64,
    pub active_weights: u64,
    pub total_weight_positions: u64,
    pub cardinality: u64,
    pub nonlinearity: Nonlinearity,
    /// Output pixels per weight application (1 for linear layers).
    pub spatial: u64,
    pub weights: Vec<WeightPlan>,
}

impl TransformPlan {
    pub fn with_nonlinearity(mut self, nonlinearity: Nonlinearity) -> Self {
        self.nonlinearity = nonlinearity;
        self
    }

    /// MACs of the weight tensors that carry no mask.
    pub fn fixed_dense_macs(&self) -> u64 {
        if self.weights.iter().all(|w| !w.masked) {
            return self.predicted_macs;
        }
        self.weights
            .iter()
            .filter(|w| !w.masked)
            .map(|w| w.positions())
            .sum::<u64>()
            * self.spatial
    }

    pub fn masked_positions(&self) -> u64 {
        self.weights
            .iter()
            .filter(|w| w.masked)
            .map(|w| w.positions())
            .sum()
    }

    /// Rewrites the active counts of the masked tensors for a new uniform
    /// sparsity, keeping the unmasked tensors as they are.
    pub(crate) fn resparsify(&mut self, sparsity: f64) {
        let positions: Vec<u64> = self
            .weights
            .iter()
            .filter(|w| w.masked)
            .map(|w| w.positions())
            .collect();
        let total: u64 = positions.iter().sum();
        let active = ((1.0 - sparsity) * total as f64).round() as u64;
        let split = split_active(active, &positions);
        for (w, a) in self.weights.iter_mut().filter(|w| w.masked).zip(split) {
            w.active = a;
        }
        self.active_weights = active;
        self.effective_sparsity = sparsity;
        self.predicted_macs = self.weights.iter().map(|w| w.active).sum::<u64>() * self.spatial;
    }
}

/// Round half up to the nearest multiple of `quantum`.
pub fn round_to_quantum(x: f64, quantum: usize) -> usize {
    let q = quantum.max(1) as f64;
    ((x / q + 0.5).floor() * q) as usize
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// k_sw = sqrt(1 / (1 - s)).
pub fn widening_factor(sparsity: f64) -> f64 {
    (1.0 / (1.0 - sparsity)).sqrt()
}

/// Splits `total` active weights over tensors proportionally to their sizes
/// using largest remainders; ties go to the lowest index.
pub fn split_active(total: u64, positions: &[u64]) -> Vec<u64> {
    let sum: u128 = positions.iter().map(|&p| p as u128).sum();
    if sum == 0 {
        return vec![0; positions.len()];
    }
    let total = (total as u128).min(sum);
    let mut out: Vec<u64> = Vec::with_capacity(positions.len());
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(positions.len());
    for (i, &p) in positions.iter().enumerate() {
        let num = total * p as u128;
        out.push((num / sum) as u64);
        rems.push((num % sum, i));
    }
    let mut left = total as u64 - out.iter().sum::<u64>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().cycle() {
        if left == 0 {
            break;
        }
        if out[i] < positions[i] {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

fn check_sparsity(s: f64) -> Result<()> {
    if (0.0..1.0).contains(&s) {
        Ok(())
    } else {
        Err(PlanError::InvalidSparsity(s))
    }
}

struct Draft {
    transform: Transform,
    nominal: f64,
    scale: f64,
    rounded: Vec<usize>,
    spatial: u64,
    weights: Vec<WeightPlan>,
}

impl Draft {
    fn finish(self) -> Result<TransformPlan> {
        let any_masked = self.weights.iter().any(|w| w.masked);
        let primary = |w: &&WeightPlan| !any_masked || w.masked;
        let total: u64 = self
            .weights
            .iter()
            .filter(primary)
            .map(|w| w.positions())
            .sum();
        let active: u64 = self.weights.iter().filter(primary).map(|w| w.active).sum();
        let effective = if total == 0 {
            0.0
        } else {
            1.0 - active as f64 / total as f64
        };
        if !(0.0..1.0).contains(&effective) {
            let main = &self.weights[0];
            return Err(PlanError::InfeasibleRounding {
                rows: main.rows as u64,
                cols: main.cols as u64,
                effective,
            });
        }
        let all_active: u64 = self.weights.iter().map(|w| w.active).sum();
        let mut plan = TransformPlan {
            transform: self.transform,
            nominal_sparsity: self.nominal,
            scale: self.scale,
            rounded_scale: self.rounded,
            effective_sparsity: effective,
            predicted_macs: all_active * self.spatial,
            active_weights: active,
            total_weight_positions: total,
            cardinality: 0,
            nonlinearity: Nonlinearity::default(),
            spatial: self.spatial,
            weights: self.weights,
        };
        plan.cardinality = table_cardinality(&plan);
        Ok(plan)
    }
}

fn weight(
    role: WeightRole,
    rows: usize,
    cols: usize,
    kernel: (usize, usize),
    active: u64,
    masked: bool,
) -> WeightPlan {
    WeightPlan {
        role,
        rows,
        cols,
        kernel_h: kernel.0,
        kernel_w: kernel.1,
        active,
        masked,
    }
}

fn kernel_of(spec: &LayerSpec) -> (usize, usize) {
    (spec.kernel_h, spec.kernel_w)
}

pub fn plan_dense(spec: &LayerSpec) -> Result<TransformPlan> {
    spec.validate()?;
    let positions = spec.weight_positions();
    Draft {
        transform: Transform::Dense,
        nominal: 0.0,
        scale: 1.0,
        rounded: Vec::new(),
        spatial: spec.spatial(),
        weights: vec![weight(
            WeightRole::Main,
            spec.fan_in(),
            spec.fan_out(),
            kernel_of(spec),
            positions,
            false,
        )],
    }
    .finish()
}

/// Sparse Wide: one layer widened on both sides (output side only for
/// depthwise), with sparsity re-solved after rounding.
pub fn plan_sparse_wide(spec: &LayerSpec, sparsity: f64, quantum: usize) -> Result<TransformPlan> {
    spec.validate()?;
    check_sparsity(sparsity)?;
    if quantum == 0 {
        return Err(PlanError::InvalidQuantum);
    }
    let (scale, planned) = if spec.kind == LayerKind::DepthwiseConv2d {
        let k = 1.0 / (1.0 - sparsity);
        let mut planned = spec.clone();
        planned.d_out = round_to_quantum(k * spec.d_out as f64, quantum).max(quantum);
        (k, planned)
    } else {
        let k = widening_factor(sparsity);
        let mut planned = spec.clone();
        planned.d_in = round_to_quantum(k * spec.d_in as f64, quantum).max(quantum);
        planned.d_out = round_to_quantum(k * spec.d_out as f64, quantum).max(quantum);
        (k, planned)
    };
    sparse_wide_on(spec, &planned, sparsity, scale)
}

/// Sparse Wide over explicit widened dims: the widened weight keeps exactly
/// as many active positions as the original dense weight has.
pub(crate) fn sparse_wide_on(
    spec: &LayerSpec,
    planned: &LayerSpec,
    sparsity: f64,
    scale: f64,
) -> Result<TransformPlan> {
    let dense = spec.weight_positions();
    let total = planned.weight_positions();
    if total < dense {
        return Err(PlanError::InfeasibleRounding {
            rows: planned.fan_in() as u64,
            cols: planned.fan_out() as u64,
            effective: 1.0 - dense as f64 / total as f64,
        });
    }
    Draft {
        transform: Transform::SparseWide,
        nominal: sparsity,
        scale,
        rounded: vec![planned.d_in, planned.d_out],
        spatial: planned.spatial(),
        weights: vec![weight(
            WeightRole::Main,
            planned.fan_in(),
            planned.fan_out(),
            kernel_of(planned),
            dense,
            true,
        )],
    }
    .finish()
}

/// Sparse Parallel: k_sp = round(1/(1-s)) masked branches of the original
/// shape, each at sparsity 1 - 1/k_sp.
pub fn plan_sparse_parallel(spec: &LayerSpec, sparsity: f64) -> Result<TransformPlan> {
    spec.validate()?;
    check_sparsity(sparsity)?;
    if spec.kind == LayerKind::DepthwiseConv2d {
        return plan_dense(spec);
    }
    let scale = 1.0 / (1.0 - sparsity);
    let branches = round_half_up(scale).max(1);
    let dense = spec.weight_positions();
    let split = split_active(dense, &vec![dense; branches]);
    let weights = split
        .into_iter()
        .enumerate()
        .map(|(j, a)| {
            weight(
                WeightRole::Branch(j),
                spec.fan_in(),
                spec.fan_out(),
                kernel_of(spec),
                a,
                true,
            )
        })
        .collect();
    Draft {
        transform: Transform::SparseParallel,
        nominal: sparsity,
        scale,
        rounded: vec![branches],
        spatial: spec.spatial(),
        weights,
    }
    .finish()
}

/// Sparse Factorized: masked U (fan_in × d_sf) and V (d_sf × fan_out).
pub fn plan_sparse_factorized(spec: &LayerSpec, sparsity: f64) -> Result<TransformPlan> {
    spec.validate()?;
    check_sparsity(sparsity)?;
    if spec.kind == LayerKind::DepthwiseConv2d {
        return plan_dense(spec);
    }
    let (fi, fo) = (spec.fan_in() as u64, spec.fan_out() as u64);
    let dense = fi * fo;
    let scale = dense as f64 / ((fi + fo) as f64 * (1.0 - sparsity));
    let inner = round_half_up(scale).max(1);
    let u_pos = fi * inner as u64;
    let v_pos = inner as u64 * fo;
    // Rounding down at s = 0 can leave fewer positions than the dense layer;
    // the factors are then simply fully active.
    let active = dense.min(u_pos + v_pos);
    let split = split_active(active, &[u_pos, v_pos]);
    Draft {
        transform: Transform::SparseFactorized,
        nominal: sparsity,
        scale,
        rounded: vec![inner],
        spatial: spec.spatial(),
        weights: vec![
            weight(
                WeightRole::FactorU,
                fi as usize,
                inner,
                kernel_of(spec),
                split[0],
                true,
            ),
            weight(
                WeightRole::FactorV,
                inner,
                fo as usize,
                (1, 1),
                split[1],
                true,
            ),
        ],
    }
    .finish()
}

/// Sparse Doped: dense rank-d_sd pair plus a masked full-shape matrix.
pub fn plan_sparse_doped(spec: &LayerSpec, sparsity: f64) -> Result<TransformPlan> {
    spec.validate()?;
    check_sparsity(sparsity)?;
    if spec.kind == LayerKind::DepthwiseConv2d {
        return plan_dense(spec);
    }
    let (fi, fo) = (spec.fan_in() as u64, spec.fan_out() as u64);
    let dense = fi * fo;
    let scale = sparsity * dense as f64 / (fi + fo) as f64;
    let mut rank = round_half_up(scale) as u64;
    // keep at least one active weight in the sparse branch
    while rank > 0 && rank * (fi + fo) >= dense {
        rank -= 1;
    }
    let mut weights = Vec::with_capacity(3);
    if rank > 0 {
        weights.push(weight(
            WeightRole::LowRankU,
            fi as usize,
            rank as usize,
            kernel_of(spec),
            fi * rank,
            false,
        ));
        weights.push(weight(
            WeightRole::LowRankV,
            rank as usize,
            fo as usize,
            (1, 1),
            rank * fo,
            false,
        ));
    }
    weights.push(weight(
        WeightRole::Sparse,
        fi as usize,
        fo as usize,
        kernel_of(spec),
        dense - rank * (fi + fo),
        true,
    ));
    Draft {
        transform: Transform::SparseDoped,
        nominal: sparsity,
        scale,
        rounded: vec![rank as usize],
        spatial: spec.spatial(),
        weights,
    }
    .finish()
}

/// Dense low-rank baseline widened by `k_lr` on both sides with rank
/// `d_in·d_out·k_lr/(d_in+d_out)`.
///
/// Its MACs are `k_lr²` times the original dense layer; only `k_lr = 1` is
/// FLOP-equivalent.
pub fn plan_low_rank_dense(spec: &LayerSpec, k_lr: f64) -> Result<TransformPlan> {
    spec.validate()?;
    if !(k_lr >= 1.0 && k_lr.is_finite()) {
        return Err(PlanError::InvalidWidening(k_lr));
    }
    if spec.kind == LayerKind::DepthwiseConv2d {
        return plan_dense(spec);
    }
    let mut planned = spec.clone();
    planned.d_in = round_half_up(k_lr * spec.d_in as f64).max(1);
    planned.d_out = round_half_up(k_lr * spec.d_out as f64).max(1);
    low_rank_on(spec, &planned, k_lr)
}

pub(crate) fn low_rank_on(
    spec: &LayerSpec,
    planned: &LayerSpec,
    k_lr: f64,
) -> Result<TransformPlan> {
    let (fi, fo) = (spec.fan_in() as f64, spec.fan_out() as f64);
    let scale = fi * fo * k_lr / (fi + fo);
    let rank = round_half_up(scale).max(1);
    let (pfi, pfo) = (planned.fan_in(), planned.fan_out());
    Draft {
        transform: Transform::LowRankDense,
        nominal: 0.0,
        scale,
        rounded: vec![planned.d_in, planned.d_out, rank],
        spatial: planned.spatial(),
        weights: vec![
            weight(
                WeightRole::LowRankU,
                pfi,
                rank,
                kernel_of(planned),
                (pfi * rank) as u64,
                false,
            ),
            weight(
                WeightRole::LowRankV,
                rank,
                pfo,
                (1, 1),
                (rank * pfo) as u64,
                false,
            ),
        ],
    }
    .finish()
}

fn table_cardinality(plan: &TransformPlan) -> u64 {
    match plan.transform {
        Transform::SparseWide | Transform::Dense => plan.weights[0].positions(),
        Transform::SparseParallel => plan.rounded_scale[0] as u64 * plan.weights[0].positions(),
        Transform::SparseFactorized => {
            let u = &plan.weights[0];
            plan.rounded_scale[0] as u64 * (u.rows + plan.weights[1].cols) as u64
        }
        Transform::SparseDoped => plan
            .weights
            .iter()
            .find(|w| w.role == WeightRole::Sparse)
            .map_or(0, |w| w.positions()),
        Transform::LowRankDense => plan.weights.iter().map(|w| w.positions()).sum(),
    }
}

/// Size of the mask search space of a plan, evaluated from its rounded
/// scale and the original layer:
/// wide `d_in'·d_out'`, parallel `k_sp·d_in·d_out`, factorized
/// `d_sf·(d_in + d_out)`, doped `d_in·d_out`.
pub fn cardinality(plan: &TransformPlan, spec: &LayerSpec) -> u64 {
    let (fi, fo) = (spec.fan_in() as u64, spec.fan_out() as u64);
    let area = spec.kernel_area() as u64;
    let r = &plan.rounded_scale;
    match plan.transform {
        Transform::Dense => fi * fo,
        Transform::SparseWide => match spec.kind {
            LayerKind::DepthwiseConv2d => r[1] as u64 * area,
            _ => r[0] as u64 * r[1] as u64 * area,
        },
        Transform::SparseParallel => r[0] as u64 * fi * fo,
        Transform::SparseFactorized => r[0] as u64 * (fi + fo),
        Transform::SparseDoped => fi * fo,
        Transform::LowRankDense => r[2] as u64 * (r[0] as u64 * area + r[1] as u64),
    }
}

/// Cardinality with unrounded scale factors. Wide, parallel and factorized
/// all reduce to `d_in·d_out/(1-s)`; doped stays at `d_in·d_out`.
pub fn unrounded_cardinality(transform: Transform, spec: &LayerSpec, sparsity: f64) -> f64 {
    let (fi, fo) = (spec.fan_in() as f64, spec.fan_out() as f64);
    let dense = fi * fo;
    match transform {
        Transform::Dense | Transform::SparseDoped => dense,
        Transform::SparseWide if spec.kind == LayerKind::DepthwiseConv2d => {
            dense / (1.0 - sparsity)
        }
        Transform::SparseWide => {
            let k = widening_factor(sparsity);
            k * k * dense
        }
        Transform::SparseParallel => dense / (1.0 - sparsity),
        Transform::SparseFactorized => dense / ((fi + fo) * (1.0 - sparsity)) * (fi + fo),
        Transform::LowRankDense => {
            let k = widening_factor(sparsity);
            dense * k / (fi + fo) * k * (fi + fo)
        }
    }
}
