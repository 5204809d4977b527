use std::sync::Arc;

use forge_masks::{rigl_update, set_update, MaskMethod, SparseMask, UpdateOutcome};
use forge_planner::{
    LayerKind, LayerRole, LayerSpec, NetworkPlan, Nonlinearity, PlannedLayer, Transform,
    TransformPlan, WeightPlan, WeightRole,
};
use forge_tensor::{
    sgd_step, BatchNormStats, CompressedRows, Gradients, Mode, Scalar, SgdConfig, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{NetworkError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    /// Seeds the weight initialization stream.
    pub model_seed: u64,
    /// Seeds the per-tensor mask streams.
    pub mask_seed: u64,
    /// Activation after every layer but the last.
    pub hidden: Nonlinearity,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            model_seed: 0,
            mask_seed: 0,
            hidden: Nonlinearity::BatchnormRelu,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// How masked weights are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecPath {
    /// Zero-filled dense weights; supports weight gradients.
    #[default]
    MaskedDense,
    /// Compressed rows of the active weights; forward and input gradients
    /// only.
    Compressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub velocity: Vec<T>,
    pub mask: Option<Arc<SparseMask>>,
}

impl<T: Scalar> Param<T> {
    /// Weight decay applies to weights only, never to biases or norm
    /// parameters.
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }

    pub fn active(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(self.value.len(), |m| m.active_count())
    }
}

#[derive(Debug, Clone)]
pub struct NormState<T> {
    /// Registry prefix, e.g. `layer1.out.bn`.
    pub name: String,
    pub stats: BatchNormStats<T>,
}

#[derive(Debug, Clone, Copy)]
enum UnitKind {
    Linear,
    Conv,
    Depthwise,
}

/// One weight application.
#[derive(Debug, Clone, Copy)]
struct Unit {
    param: usize,
    kind: UnitKind,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Act {
    norm: Option<Norm>,
    relu: bool,
}

#[derive(Debug, Clone)]
enum Core {
    Single(Unit),
    Parallel(Vec<(Unit, Act)>),
    Factorized {
        u: Unit,
        act: Act,
        v: Unit,
    },
    Doped {
        low_rank: Option<(Unit, Unit)>,
        sparse: Unit,
        act: Act,
    },
    LowRank {
        u: Unit,
        v: Unit,
    },
}

#[derive(Debug, Clone)]
struct Layer {
    core: Core,
    bias: Option<usize>,
    outer: Act,
}

/// Result of one forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Var,
    /// Tape handle of every registry parameter, in registry order.
    pub params: Vec<Var>,
    /// Weight MACs spent by each layer.
    pub layer_macs: Vec<u64>,
}

/// Outcome of one mask update on one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskUpdate {
    pub name: String,
    pub outcome: UpdateOutcome,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    plan: NetworkPlan,
    params: Vec<Param<T>>,
    norms: Vec<NormState<T>>,
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    bn_eps: f64,
    bn_momentum: f64,
}

fn mix_seed(seed: u64, layer: usize, slot: usize) -> u64 {
    // splitmix64 finalizer over (seed, layer, slot)
    let mut z = seed
        .wrapping_add((layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((slot as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Builder<T> {
    params: Vec<Param<T>>,
    norms: Vec<NormState<T>>,
    rng: ChaCha8Rng,
    mask_seed: u64,
}

impl<T: Scalar> Builder<T> {
    fn push(
        &mut self,
        name: String,
        kind: ParamKind,
        value: Tensor<T>,
        mask: Option<SparseMask>,
    ) -> usize {
        let velocity = vec![T::zero(); value.len()];
        self.params.push(Param {
            name,
            kind,
            value,
            velocity,
            mask: mask.map(Arc::new),
        });
        self.params.len() - 1
    }

    /// Fan-in scaled normal init over the executed (widened) shape, then
    /// masked.
    fn weight(&mut self, layer: usize, slot: usize, w: &WeightPlan) -> Result<usize> {
        let shape = [w.rows, w.cols];
        let std = (2.0 / w.rows.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let mut value = Tensor::from_fn(&shape, |_| {
            T::from_f64(std * rng.sample::<f64, _>(StandardNormal))
        });
        let mask = if w.masked {
            let seed = mix_seed(self.mask_seed, layer, slot);
            let mask = SparseMask::random_with_count(&shape, w.active as usize, seed)?;
            mask.apply(value.data_mut())?;
            Some(mask)
        } else {
            None
        };
        Ok(self.push(
            format!("layer{layer}.{}.weight", w.role.segment()),
            ParamKind::Weight,
            value,
            mask,
        ))
    }

    fn norm(&mut self, prefix: String, features: usize) -> Norm {
        let gamma = self.push(
            format!("{prefix}.gamma"),
            ParamKind::NormScale,
            Tensor::filled(&[features], T::one()),
            None,
        );
        let beta = self.push(
            format!("{prefix}.beta"),
            ParamKind::NormShift,
            Tensor::zeros(&[features]),
            None,
        );
        self.norms.push(NormState {
            name: prefix,
            stats: BatchNormStats::new(features),
        });
        Norm {
            gamma,
            beta,
            stats: self.norms.len() - 1,
        }
    }

    fn act(&mut self, prefix: String, features: usize, nonlinearity: Nonlinearity) -> Act {
        match nonlinearity {
            Nonlinearity::BatchnormRelu => Act {
                norm: Some(self.norm(prefix, features)),
                relu: true,
            },
            Nonlinearity::Relu => Act {
                norm: None,
                relu: true,
            },
            Nonlinearity::Identity => Act::default(),
        }
    }
}

fn unit_for(spec: &LayerSpec, w: &WeightPlan, param: usize) -> Unit {
    let secondary = matches!(w.role, WeightRole::FactorV | WeightRole::LowRankV);
    let kind = match spec.kind {
        LayerKind::Linear => UnitKind::Linear,
        LayerKind::Conv2d => UnitKind::Conv,
        LayerKind::DepthwiseConv2d => UnitKind::Depthwise,
    };
    let (stride, padding) = if secondary {
        (1, 0)
    } else {
        (spec.stride, spec.padding)
    };
    Unit {
        param,
        kind,
        kernel: (w.kernel_h, w.kernel_w),
        stride,
        padding,
    }
}

fn check_weights(i: usize, pl: &PlannedLayer) -> Result<()> {
    let plan = &pl.plan;
    let spec = &pl.planned;
    let bad = |reason: String| Err(NetworkError::Inconsistent { layer: i, reason });
    let roles: Vec<WeightRole> = plan.weights.iter().map(|w| w.role).collect();
    let expected = match plan.transform {
        Transform::SparseParallel => plan.rounded_scale.first().copied().unwrap_or(0),
        Transform::SparseFactorized | Transform::LowRankDense => 2,
        Transform::SparseDoped if plan.rounded_scale.first() == Some(&0) => 1,
        Transform::SparseDoped => 3,
        Transform::Dense | Transform::SparseWide => 1,
    };
    if roles.len() != expected {
        return bad(format!(
            "{} weight tensors for {:?}, expected {expected}",
            roles.len(),
            plan.transform
        ));
    }
    for w in &plan.weights {
        let first = !matches!(w.role, WeightRole::FactorV | WeightRole::LowRankV);
        if first && w.rows != spec.fan_in() {
            return bad(format!(
                "{:?} has {} rows, layer fan-in is {}",
                w.role,
                w.rows,
                spec.fan_in()
            ));
        }
        let last = !matches!(w.role, WeightRole::FactorU | WeightRole::LowRankU);
        if last && w.cols != spec.fan_out() {
            return bad(format!(
                "{:?} has {} cols, layer fan-out is {}",
                w.role,
                w.cols,
                spec.fan_out()
            ));
        }
        if w.active > w.positions() {
            return bad(format!(
                "{:?} has more active weights than positions",
                w.role
            ));
        }
    }
    Ok(())
}

/// Input shape (without batch) a planned first layer expects.
fn input_shape_of(spec: &LayerSpec) -> Vec<usize> {
    match spec.kind {
        LayerKind::Linear => vec![spec.d_in],
        _ => {
            let extent = |out: usize, k: usize| {
                ((out - 1) * spec.stride + k)
                    .saturating_sub(2 * spec.padding)
                    .max(1)
            };
            vec![
                spec.d_in,
                extent(spec.out_h, spec.kernel_h),
                extent(spec.out_w, spec.kernel_w),
            ]
        }
    }
}

/// Materializes every planned layer with seeded weights and masks.
pub fn build<T: Scalar>(plan: &NetworkPlan, opts: &BuildOptions) -> Result<Network<T>> {
    let Some(first) = plan.layers.first() else {
        return Err(forge_planner::PlanError::EmptyNetwork.into());
    };
    let mut b = Builder {
        params: Vec::new(),
        norms: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(opts.model_seed),
        mask_seed: opts.mask_seed,
    };
    let last = plan.layers.len() - 1;
    let mut layers = Vec::with_capacity(plan.layers.len());
    for (i, pl) in plan.layers.iter().enumerate() {
        check_weights(i, pl)?;
        let spec = &pl.planned;
        let tp: &TransformPlan = &pl.plan;
        let mut units = Vec::with_capacity(tp.weights.len());
        for (slot, w) in tp.weights.iter().enumerate() {
            let p = b.weight(i, slot, w)?;
            units.push(unit_for(spec, w, p));
        }
        let nl = tp.nonlinearity;
        let d_out = spec.fan_out();
        let core = match tp.transform {
            Transform::Dense | Transform::SparseWide => Core::Single(units[0]),
            Transform::SparseParallel => Core::Parallel(
                units
                    .iter()
                    .enumerate()
                    .map(|(j, &u)| (u, b.act(format!("layer{i}.branch{j}.bn"), d_out, nl)))
                    .collect(),
            ),
            Transform::SparseFactorized => Core::Factorized {
                u: units[0],
                act: b.act(format!("layer{i}.factor_u.bn"), tp.weights[0].cols, nl),
                v: units[1],
            },
            Transform::SparseDoped => {
                let sparse = *units.last().expect("doped layer has a sparse tensor");
                Core::Doped {
                    low_rank: (units.len() == 3).then(|| (units[0], units[1])),
                    sparse,
                    act: b.act(format!("layer{i}.sparse.bn"), d_out, nl),
                }
            }
            Transform::LowRankDense => Core::LowRank {
                u: units[0],
                v: units[1],
            },
        };
        let bias = spec.has_bias.then(|| {
            b.push(
                format!("layer{i}.out.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[d_out]),
                None,
            )
        });
        let outer = if i == last {
            Act::default()
        } else {
            b.act(format!("layer{i}.out.bn"), d_out, opts.hidden)
        };
        layers.push(Layer { core, bias, outer });
    }
    Ok(Network {
        plan: plan.clone(),
        params: b.params,
        norms: b.norms,
        layers,
        input_shape: input_shape_of(&first.planned),
        bn_eps: opts.bn_eps,
        bn_momentum: opts.bn_momentum,
    })
}

/// Wraps one transformed layer as a one-layer network, executing the
/// widened dims the plan chose.
pub fn single_layer_plan(spec: &LayerSpec, plan: &TransformPlan) -> NetworkPlan {
    let mut planned = spec.clone().with_role(LayerRole::BoundaryLast);
    let r = &plan.rounded_scale;
    if matches!(
        plan.transform,
        Transform::SparseWide | Transform::LowRankDense
    ) {
        planned.d_in = r[0];
        planned.d_out = r[1];
    }
    NetworkPlan {
        transform: plan.transform,
        nominal_sparsity: plan.nominal_sparsity,
        layers: vec![PlannedLayer {
            spec: spec.clone(),
            planned,
            plan: plan.clone(),
        }],
        shared_widening: (plan.transform == Transform::SparseWide).then_some(plan.scale),
        baseline_total_macs: spec.dense_macs(),
        planned_total_macs: plan.predicted_macs,
        redistributed_sparsity: None,
    }
}

struct Ctx<'a, T> {
    tape: &'a mut Tape<T>,
    params: &'a [Param<T>],
    vars: &'a [Var],
    norms: &'a mut [NormState<T>],
    mode: Mode,
    path: ExecPath,
    dense_grad: bool,
    eps: f64,
    momentum: f64,
}

impl<T: Scalar> Ctx<'_, T> {
    fn unit(&mut self, u: &Unit, z: Var) -> Result<Var> {
        let w = self.vars[u.param];
        let param = &self.params[u.param];
        let mask = param.mask.as_ref();
        let compressed = |mask: &Arc<SparseMask>| -> Result<Arc<CompressedRows<T>>> {
            Ok(Arc::new(CompressedRows::from_masked(&param.value, mask)?))
        };
        let t = &mut *self.tape;
        let out = match (u.kind, mask, self.path) {
            (UnitKind::Linear, Some(m), ExecPath::Compressed) => {
                t.compressed_linear(z, &compressed(m)?)?
            }
            (UnitKind::Linear, Some(m), ExecPath::MaskedDense) => {
                t.masked_linear(z, w, m, None, self.dense_grad)?
            }
            (UnitKind::Linear, None, _) => t.matmul(z, w)?,
            (UnitKind::Conv, Some(m), ExecPath::Compressed) => {
                let (patches, g) = t.im2col(z, u.kernel, u.stride, u.padding)?;
                let rows = t.compressed_linear(patches, &compressed(m)?)?;
                t.rows_to_nchw(rows, g.batch, g.out_h, g.out_w)?
            }
            (UnitKind::Conv, mask, _) => {
                t.conv2d(z, w, mask, u.kernel, u.stride, u.padding, self.dense_grad)?
            }
            (UnitKind::Depthwise, mask, _) => {
                t.depthwise_conv2d(z, w, mask, u.kernel, u.stride, u.padding, self.dense_grad)?
            }
        };
        Ok(out)
    }

    fn act(&mut self, a: &Act, z: Var) -> Result<Var> {
        let mut z = z;
        if let Some(n) = a.norm {
            let (g, b) = (self.vars[n.gamma], self.vars[n.beta]);
            let stats = &mut self.norms[n.stats].stats;
            z = self
                .tape
                .batchnorm(z, g, b, stats, self.eps, self.momentum, self.mode)?;
        }
        if a.relu {
            z = self.tape.relu(z)?;
        }
        Ok(z)
    }

    fn layer(&mut self, layer: &Layer, z: Var) -> Result<Var> {
        let mut y = match &layer.core {
            Core::Single(u) => self.unit(u, z)?,
            Core::Parallel(branches) => {
                let mut sum: Option<Var> = None;
                for (u, a) in branches {
                    let h = self.unit(u, z)?;
                    let h = self.act(a, h)?;
                    sum = Some(match sum {
                        Some(s) => self.tape.add(s, h)?,
                        None => h,
                    });
                }
                sum.expect("parallel layer has at least one branch")
            }
            Core::Factorized { u, act, v } => {
                let h = self.unit(u, z)?;
                let h = self.act(act, h)?;
                self.unit(v, h)?
            }
            Core::Doped {
                low_rank,
                sparse,
                act,
            } => {
                let s = self.unit(sparse, z)?;
                let s = self.act(act, s)?;
                match low_rank {
                    Some((u, v)) => {
                        let h = self.unit(u, z)?;
                        let l = self.unit(v, h)?;
                        self.tape.add(l, s)?
                    }
                    None => s,
                }
            }
            Core::LowRank { u, v } => {
                let h = self.unit(u, z)?;
                self.unit(v, h)?
            }
        };
        if let Some(b) = layer.bias {
            y = self.tape.add_bias(y, self.vars[b])?;
        }
        self.act(&layer.outer, y)
    }
}

impl<T: Scalar> Network<T> {
    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    /// Per-example input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn norms(&self) -> &[NormState<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormState<T>] {
        &mut self.norms
    }

    /// Overwrites a parameter's values; inactive positions are zeroed again.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| NetworkError::UnknownParam(name.into()))?;
        if p.value.shape() != value.shape() {
            return Err(NetworkError::ParamShape {
                name: name.into(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        p.value = value;
        if let Some(m) = &p.mask {
            m.apply(p.value.data_mut())?;
        }
        Ok(())
    }

    /// Replaces a parameter's mask, zeroing newly inactive weights.
    pub fn set_mask(&mut self, name: &str, mask: SparseMask) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| NetworkError::UnknownParam(name.into()))?;
        if p.mask.is_none() || mask.len() != p.value.len() {
            return Err(NetworkError::ParamShape {
                name: name.into(),
                expected: p.value.shape().to_vec(),
                found: mask.shape().to_vec(),
            });
        }
        mask.apply(p.value.data_mut())?;
        for (v, &on) in p.velocity.iter_mut().zip(mask.bits()) {
            if !on {
                *v = T::zero();
            }
        }
        p.mask = Some(Arc::new(mask));
        Ok(())
    }

    /// Trainable parameter count. With `active_only`, masked tensors count
    /// their active weights; everything else counts in full.
    pub fn param_count(&self, active_only: bool) -> u64 {
        self.params
            .iter()
            .map(|p| if active_only { p.active() } else { p.value.len() } as u64)
            .sum()
    }

    /// Mask search space: masked positions of transformed layers, all weight
    /// positions of untransformed ones.
    pub fn search_space(&self) -> u64 {
        let mut total = 0u64;
        for (i, _) in self.plan.layers.iter().enumerate() {
            let prefix = format!("layer{i}.");
            let weights: Vec<&Param<T>> = self
                .params
                .iter()
                .filter(|p| p.kind == ParamKind::Weight && p.name.starts_with(&prefix))
                .collect();
            let masked: u64 = weights
                .iter()
                .filter(|p| p.mask.is_some())
                .map(|p| p.value.len() as u64)
                .sum();
            total += if masked > 0 {
                masked
            } else {
                weights.iter().map(|p| p.value.len() as u64).sum()
            };
        }
        total
    }

    /// Planner-predicted MACs per example, per layer.
    pub fn predicted_layer_macs(&self) -> Vec<u64> {
        self.plan
            .layers
            .iter()
            .map(|l| l.plan.predicted_macs)
            .collect()
    }

    /// Records one forward pass. `dense_grad` surfaces full gradients of
    /// masked weights (needed on gradient-driven mask updates).
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
        path: ExecPath,
        dense_grad: bool,
    ) -> Result<ForwardPass> {
        let z = self.check_input(tape, input)?;
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        self.run(tape, z, vars, mode, path, dense_grad)
    }

    /// Like [`Network::forward`] but reads every parameter from `params`,
    /// given in registry order.
    pub fn forward_with(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        params: &[Var],
        mode: Mode,
        path: ExecPath,
    ) -> Result<ForwardPass> {
        if params.len() != self.params.len() {
            return Err(NetworkError::Inconsistent {
                layer: 0,
                reason: format!(
                    "{} parameter handles for {} parameters",
                    params.len(),
                    self.params.len()
                ),
            });
        }
        for (p, &v) in self.params.iter().zip(params) {
            if tape.value(v).shape() != p.value.shape() {
                return Err(NetworkError::ParamShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: tape.value(v).shape().to_vec(),
                });
            }
        }
        let z = self.check_input(tape, input)?;
        self.run(tape, z, params.to_vec(), mode, path, false)
    }

    fn check_input(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        let per_example: usize = self.input_shape.iter().product();
        let ok = shape.len() >= 2 && shape[1..].iter().product::<usize>() == per_example;
        if !ok || (shape[1..] != self.input_shape[..] && self.input_shape.len() != 1) {
            return Err(NetworkError::Input {
                expected: self.input_shape.clone(),
                found: shape,
            });
        }
        if self.input_shape.len() == 1 && shape.len() != 2 {
            return Ok(tape.flatten(input)?);
        }
        Ok(input)
    }

    fn run(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        vars: Vec<Var>,
        mode: Mode,
        path: ExecPath,
        dense_grad: bool,
    ) -> Result<ForwardPass> {
        let mut z = input;
        let mut ctx = Ctx {
            tape,
            params: &self.params,
            vars: &vars,
            norms: &mut self.norms,
            mode,
            path,
            dense_grad,
            eps: self.bn_eps,
            momentum: self.bn_momentum,
        };
        let mut layer_macs = Vec::with_capacity(self.layers.len());
        for (layer, pl) in self.layers.iter().zip(&self.plan.layers) {
            if pl.planned.kind == LayerKind::Linear && ctx.tape.value(z).shape().len() > 2 {
                z = ctx.tape.flatten(z)?;
            }
            let before = ctx.tape.macs();
            z = ctx.layer(layer, z)?;
            layer_macs.push(ctx.tape.macs() - before);
        }
        Ok(ForwardPass {
            output: z,
            params: vars,
            layer_macs,
        })
    }

    /// Eval-mode forward on a batch. Returns outputs and total weight MACs.
    pub fn predict(&mut self, input: &Tensor<T>, path: ExecPath) -> Result<(Tensor<T>, u64)> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let pass = self.forward(&mut tape, x, Mode::Eval, path, false)?;
        Ok((tape.value(pass.output).clone(), tape.macs()))
    }

    /// One optimizer step over every parameter. Masked tensors only move at
    /// active positions.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, pass: &ForwardPass, config: &SgdConfig) {
        for (p, &v) in self.params.iter_mut().zip(&pass.params) {
            let Some(g) = grads.get(v) else { continue };
            let decay = p.decays();
            sgd_step(
                p.value.data_mut(),
                g.data(),
                &mut p.velocity,
                config,
                decay,
                p.mask.as_deref(),
            );
        }
    }

    /// Drop/grow update of every mask. Dropped and grown positions have
    /// their weights and momentum zeroed.
    pub fn update_masks(
        &mut self,
        method: MaskMethod,
        fraction: f64,
        grads: Option<(&Gradients<T>, &ForwardPass)>,
        step: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<MaskUpdate>> {
        let mut out = Vec::new();
        if method == MaskMethod::Static {
            return Ok(out);
        }
        for (i, p) in self.params.iter_mut().enumerate() {
            let Some(mask) = p.mask.as_mut() else {
                continue;
            };
            let mask = Arc::make_mut(mask);
            let outcome = match method {
                MaskMethod::Rigl => {
                    let (grads, pass) = grads.ok_or_else(|| NetworkError::Inconsistent {
                        layer: i,
                        reason: "gradient-driven update without gradients".into(),
                    })?;
                    let g = grads
                        .get(pass.params[i])
                        .ok_or_else(|| NetworkError::UnknownParam(p.name.clone()))?;
                    rigl_update(p.value.data_mut(), g.data(), mask, fraction, step)?
                }
                MaskMethod::Set => set_update(p.value.data_mut(), mask, fraction, rng, step)?,
                MaskMethod::Static => unreachable!(),
            };
            for &idx in outcome.dropped.iter().chain(&outcome.grown) {
                p.velocity[idx as usize] = T::zero();
            }
            out.push(MaskUpdate {
                name: p.name.clone(),
                outcome,
            });
        }
        Ok(out)
    }

    /// Activates every position of every mask.
    pub fn densify(&mut self) {
        for p in &mut self.params {
            if let Some(mask) = p.mask.as_mut() {
                forge_masks::densify(Arc::make_mut(mask));
            }
        }
    }

    /// `(name, mask)` for every masked tensor.
    pub fn masks(&self) -> impl Iterator<Item = (&str, &SparseMask)> {
        self.params
            .iter()
            .filter_map(|p| p.mask.as_deref().map(|m| (p.name.as_str(), m)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use forge_planner::plan_sparse_parallel;

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(mix_seed(0, 0, 0), mix_seed(0, 0, 1));
        assert_ne!(mix_seed(0, 1, 0), mix_seed(0, 0, 1));
        assert_eq!(mix_seed(7, 2, 3), mix_seed(7, 2, 3));
    }

    #[test]
    fn parallel_branch_masks() {
        let spec = LayerSpec::linear(4, 4);
        let plan = plan_sparse_parallel(&spec, 0.5).unwrap();
        let net: Network<f64> =
            build(&single_layer_plan(&spec, &plan), &BuildOptions::default()).unwrap();
        let masks: Vec<_> = net.masks().collect();
        assert_eq!(masks.len(), 2);
        for (name, m) in masks {
            assert!(name.starts_with("layer0.branch"));
            assert_eq!((m.len(), m.active_count()), (16, 8));
        }
    }

    #[test]
    fn conv_input_extent() {
        let spec = LayerSpec::conv2d(3, 8, (3, 3), (8, 8)).with_geometry(1, 1);
        assert_eq!(input_shape_of(&spec), vec![3, 8, 8]);
        let spec = LayerSpec::conv2d(3, 8, (3, 3), (4, 4)).with_geometry(2, 1);
        assert_eq!(input_shape_of(&spec), vec![3, 7, 7]);
    }
}
