use forge_masks::MaskMethod;
use forge_network::{build, BuildOptions, ExecPath, Network, NetworkError};
use forge_planner::{plan_network, redistribute_sparsity, NetworkPlan, Transform};
use forge_tensor::{cosine_lr, Mode, SgdConfig, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::config::{FineTune, TrainConfig};
use crate::data::{epoch_order, load_dataset, Split, Targets};
use crate::report;
use crate::{Result, TrainError};

pub const CHECKPOINT_FILE: &str = "checkpoint.sift";
const EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub drop_fraction: f64,
    /// Forward weight MACs of this step's batch.
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's steps.
    pub mean_step_loss: f64,
    /// Eval-mode loss over the whole training split.
    pub train_loss: f64,
    pub test_loss: f64,
    /// Top-1 accuracy for classification, mean squared error for regression.
    pub test_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskUpdateRecord {
    pub step: u64,
    pub drop_fraction: f64,
    pub tensors: usize,
    pub dropped: usize,
    pub grown: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub layer: usize,
    pub transform: Transform,
    pub rounded_scale: Vec<usize>,
    pub effective_sparsity: f64,
    pub cardinality: u64,
    pub active_weights: u64,
    pub total_positions: u64,
    pub predicted_macs: u64,
    /// Counter reading per example from the first training step.
    pub measured_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub transform: Transform,
    pub sparsity: f64,
    pub method: MaskMethod,
    pub fine_tune: FineTune,
    pub threads: usize,
    pub metric: String,
    pub train_examples: usize,
    pub test_examples: usize,
    pub total_steps: u64,
    pub initial_train_loss: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub mask_updates: Vec<MaskUpdateRecord>,
    pub baseline_macs: u64,
    pub planned_macs: u64,
    pub measured_macs: u64,
    pub cumulative_training_macs: u64,
    /// Twice the forward MACs; not part of the iso-FLOP audit.
    pub backward_macs_estimate: u64,
    pub active_params: u64,
    pub total_params: u64,
    pub layers: Vec<LayerAudit>,
    pub redistributed_sparsity: Option<f64>,
}

impl RunReport {
    pub fn final_test_metric(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.test_metric)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }
}

/// Evaluation of one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    /// Accuracy in [0, 1] or mean squared error.
    pub metric: f64,
    pub examples: usize,
    pub macs: u64,
}

/// Plans the configured network, with optional sparsity redistribution.
pub fn plan_from_config(cfg: &TrainConfig) -> Result<NetworkPlan> {
    let plan = plan_network(&cfg.layer_specs(), &cfg.plan_options())?;
    if cfg.redistribute && plan.planned_total_macs != plan.baseline_total_macs {
        Ok(redistribute_sparsity(&plan, plan.baseline_total_macs)?)
    } else {
        Ok(plan)
    }
}

fn check_compatible(net: &Network<f32>, split: &Split) -> Result<()> {
    let per_example: usize = net.input_shape().iter().product();
    if split.example_len() != per_example {
        return Err(TrainError::invalid(
            "layers[0]",
            format!(
                "network reads {per_example} values per example, dataset has {}",
                split.example_len()
            ),
        ));
    }
    let outputs = net
        .plan()
        .layers
        .last()
        .map_or(0, |l| l.planned.output_features());
    let expected = match &split.targets {
        Targets::Classes { classes, .. } => *classes,
        Targets::Values(v) => v.shape()[1],
    };
    if outputs != expected {
        return Err(TrainError::invalid(
            "layers",
            format!("last layer has {outputs} outputs, dataset needs {expected}"),
        ));
    }
    Ok(())
}

fn loss_of(tape: &mut Tape<f32>, output: Var, targets: &Targets) -> Result<Var> {
    Ok(match targets {
        Targets::Classes { labels, .. } => tape.softmax_cross_entropy(output, labels)?,
        Targets::Values(v) => tape.mse(output, v)?,
    })
}

/// Eval-mode loss and metric over a whole split.
pub fn evaluate(net: &mut Network<f32>, split: &Split, path: ExecPath) -> Result<Metrics> {
    check_compatible(net, split)?;
    let shape = net.input_shape().to_vec();
    let (mut loss, mut hits, mut sq, mut macs) = (0.0f64, 0usize, 0.0f64, 0u64);
    let n = split.len();
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let (x, targets) = split.batch(&idx, &shape)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pass = net.forward(&mut tape, xv, Mode::Eval, path, false)?;
        let l = loss_of(&mut tape, pass.output, &targets)?;
        loss += tape.value(l).data()[0] as f64 * idx.len() as f64;
        macs += tape.macs();
        let out = tape.value(pass.output);
        match &targets {
            Targets::Classes { labels, .. } => hits += count_hits(out, labels),
            Targets::Values(v) => {
                sq += out
                    .data()
                    .iter()
                    .zip(v.data())
                    .map(|(&p, &t)| ((p - t) as f64).powi(2))
                    .sum::<f64>();
            }
        }
    }
    let metric = match &split.targets {
        Targets::Classes { .. } => hits as f64 / n as f64,
        Targets::Values(v) => sq / v.len() as f64,
    };
    Ok(Metrics {
        loss: loss / n as f64,
        metric,
        examples: n,
        macs,
    })
}

/// Argmax hits; ties resolve to the lowest class index.
fn count_hits(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

fn batches(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n / batch).map(|b| b * batch..(b + 1) * batch).collect();
    // a trailing batch is kept only when normalization can use it
    if n % batch >= 2 {
        out.push(n / batch * batch..n);
    }
    out
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    batches(n, batch).len()
}

fn diverged(e: TrainError, step: u64) -> TrainError {
    match e {
        TrainError::Tensor(TensorError::NonFinite { .. })
        | TrainError::Network(NetworkError::Tensor(TensorError::NonFinite { .. })) => {
            TrainError::NonFiniteLoss { step }
        }
        other => other,
    }
}

/// Runs the configured experiment and writes checkpoints and reports into
/// `cfg.output_dir`.
pub fn train(cfg: &TrainConfig) -> Result<RunReport> {
    let threads = forge_bench::threads_from_env()
        .map_err(|e| TrainError::invalid("FORGE_THREADS", e.to_string()))?;
    cfg.validate()?;
    let (train_split, test_split) = load_dataset(&cfg.dataset)?;
    let plan = plan_from_config(cfg)?;
    let opts = BuildOptions {
        model_seed: cfg.seeds.model,
        mask_seed: cfg.seeds.mask,
        hidden: cfg.hidden_activation,
        ..BuildOptions::default()
    };
    let mut net: Network<f32> = build(&plan, &opts)?;
    check_compatible(&net, &train_split)?;
    if let Some(path) = &cfg.init_checkpoint {
        load_checkpoint(path)?.apply_to(&mut net)?;
    }
    let method = match cfg.fine_tune {
        FineTune::None => cfg.mask.method,
        FineTune::Sparse => MaskMethod::Static,
        FineTune::Densify => {
            net.densify();
            MaskMethod::Static
        }
    };
    let mut mask_cfg = cfg.mask.clone();
    mask_cfg.method = method;

    let o = &cfg.optimizer;
    let spe = steps_per_epoch(train_split.len(), o.batch_size);
    let total_steps = (spe * o.epochs) as u64;
    let schedule = mask_cfg.schedule(total_steps);
    let mut sgd = SgdConfig {
        lr: o.lr_peak,
        momentum: o.momentum,
        weight_decay: o.weight_decay,
        nesterov: o.nesterov,
    };
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.mask ^ 0x5E7_0000_0000);
    let shape = net.input_shape().to_vec();
    std::fs::create_dir_all(&cfg.output_dir).map_err(TrainError::io(&cfg.output_dir))?;

    let initial_train_loss = evaluate(&mut net, &train_split, ExecPath::MaskedDense)?.loss;
    let mut steps = Vec::with_capacity(total_steps as usize);
    let mut epochs = Vec::with_capacity(o.epochs);
    let mut updates = Vec::new();
    let mut first_layer_macs: Option<(Vec<u64>, u64)> = None;
    let mut step = 0u64;
    for epoch in 0..o.epochs {
        let order = epoch_order(train_split.len(), cfg.seeds.data, epoch);
        let mut epoch_loss = 0.0;
        for range in batches(order.len(), o.batch_size) {
            let idx = &order[range];
            let (x, targets) = train_split.batch(idx, &shape)?;
            let update = schedule.is_update_step(step);
            let lr = cosine_lr(step, total_steps, o.lr_peak, o.lr_min);
            sgd.lr = lr;

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let dense_grad = update && method == MaskMethod::Rigl;
            let pass = net
                .forward(
                    &mut tape,
                    xv,
                    Mode::Train,
                    ExecPath::MaskedDense,
                    dense_grad,
                )
                .map_err(|e| diverged(e.into(), step))?;
            let loss_var =
                loss_of(&mut tape, pass.output, &targets).map_err(|e| diverged(e, step))?;
            let loss = tape.value(loss_var).data()[0] as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            let macs = tape.macs();
            if first_layer_macs.is_none() {
                first_layer_macs = Some((pass.layer_macs.clone(), idx.len() as u64));
            }
            let grads = tape
                .backward(loss_var)
                .map_err(|e| diverged(e.into(), step))?;
            net.sgd_step(&grads, &pass, &sgd);
            let drop_fraction = if update {
                schedule.drop_fraction(step)
            } else {
                0.0
            };
            if update {
                let outcome = net.update_masks(
                    method,
                    drop_fraction,
                    Some((&grads, &pass)),
                    step,
                    &mut mask_rng,
                )?;
                if !outcome.is_empty() {
                    updates.push(MaskUpdateRecord {
                        step,
                        drop_fraction,
                        tensors: outcome.len(),
                        dropped: outcome.iter().map(|u| u.outcome.dropped.len()).sum(),
                        grown: outcome.iter().map(|u| u.outcome.grown.len()).sum(),
                    });
                }
            }
            epoch_loss += loss;
            steps.push(StepRecord {
                step,
                epoch,
                loss,
                lr,
                drop_fraction,
                macs,
            });
            step += 1;
        }
        let train_eval = evaluate(&mut net, &train_split, ExecPath::MaskedDense)?;
        let test_eval = evaluate(&mut net, &test_split, ExecPath::MaskedDense)?;
        epochs.push(EpochRecord {
            epoch,
            mean_step_loss: epoch_loss / spe.max(1) as f64,
            train_loss: train_eval.loss,
            test_loss: test_eval.loss,
            test_metric: test_eval.metric,
        });
        let meta = CheckpointMeta {
            plan: plan.clone(),
            hidden_activation: cfg.hidden_activation,
            bn_eps: opts.bn_eps,
            bn_momentum: opts.bn_momentum,
            regression: cfg.dataset.is_regression(),
            epoch,
            step,
        };
        save_checkpoint(
            &cfg.output_dir.join(CHECKPOINT_FILE),
            &Checkpoint::capture(&net, meta),
        )?;
    }

    let (layer_macs, batch) = first_layer_macs.unwrap_or_default();
    let layers = plan
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerAudit {
            layer: i,
            transform: l.plan.transform,
            rounded_scale: l.plan.rounded_scale.clone(),
            effective_sparsity: l.plan.effective_sparsity,
            cardinality: l.plan.cardinality,
            active_weights: l.plan.active_weights,
            total_positions: l.plan.total_weight_positions,
            predicted_macs: l.plan.predicted_macs,
            measured_macs: layer_macs.get(i).map_or(0, |m| m / batch.max(1)),
        })
        .collect::<Vec<_>>();
    let cumulative: u64 = steps.iter().map(|s| s.macs).sum();
    let report = RunReport {
        transform: cfg.transform,
        sparsity: cfg.sparsity,
        method,
        fine_tune: cfg.fine_tune,
        threads,
        metric: if cfg.dataset.is_regression() {
            "mse"
        } else {
            "accuracy"
        }
        .into(),
        train_examples: train_split.len(),
        test_examples: test_split.len(),
        total_steps,
        initial_train_loss,
        steps,
        epochs,
        mask_updates: updates,
        baseline_macs: plan.baseline_total_macs,
        planned_macs: plan.planned_total_macs,
        measured_macs: layers.iter().map(|l| l.measured_macs).sum(),
        cumulative_training_macs: cumulative,
        backward_macs_estimate: 2 * cumulative,
        active_params: net.param_count(true),
        total_params: net.param_count(false),
        layers,
        redistributed_sparsity: plan.redistributed_sparsity,
    };
    report::write_run_reports(&cfg.output_dir, &report, cfg.svg)?;
    Ok(report)
}

/// Loads a checkpoint and evaluates it on the test split of `dataset`.
pub fn evaluate_checkpoint(
    checkpoint: &std::path::Path,
    dataset: &crate::data::DatasetDescriptor,
) -> Result<Metrics> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut net = ckpt.to_network()?;
    let (_, test) = load_dataset(dataset)?;
    evaluate(&mut net, &test, ExecPath::MaskedDense)
}
