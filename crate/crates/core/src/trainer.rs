//! SGD-momentum training with a cosine schedule, weight decay and
//! classifier projections, organized as the two-stage pipeline: stage 1
//! trains the whole network with cross-entropy, stage 2 fine-tunes the
//! last one or two layers with a balancing loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::balancers::{
    classifier_norms, l2unit_layer, maxnorm_layer, weight_decay_grad, weight_decay_penalty,
    BalancerConfig, ConstraintMode, DecayScope,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{effective_number_weights, weighted_softmax_ce, ClassWeights};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::tensor::Tensor2;

/// Default class-balanced β.
pub const DEFAULT_BETA: f64 = 0.9999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "cb")]
    ClassBalanced {
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub loss: LossKind,
    /// Number of trailing layers to train; 0 trains all of them.
    #[serde(default)]
    pub trainable_layers: usize,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub balancer: BalancerConfig,
    #[serde(default)]
    pub seed: u64,
    /// Snapshot the 2-D pre-logit classifier weights at iteration 0 and
    /// after every epoch. Requires a classifier with two input features.
    #[serde(default)]
    pub record_prelogit: bool,
}

fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}

impl StageConfig {
    /// Full-network cross-entropy training: batch 64, lr 0.01 decayed to
    /// 0, momentum 0.9.
    pub fn stage1(epochs: usize, lambda: f64, seed: u64) -> Self {
        Self {
            loss: LossKind::CrossEntropy,
            trainable_layers: 0,
            epochs,
            batch_size: default_batch(),
            base_lr: default_lr(),
            momentum: default_momentum(),
            balancer: BalancerConfig {
                lambda,
                ..BalancerConfig::default()
            },
            seed,
            record_prelogit: false,
        }
    }

    /// Head fine-tuning with class-balanced loss, 20 epochs by default.
    pub fn stage2(trainable_layers: usize, beta: f64, balancer: BalancerConfig, seed: u64) -> Self {
        Self {
            loss: LossKind::ClassBalanced { beta },
            trainable_layers,
            epochs: 20,
            batch_size: default_batch(),
            base_lr: default_lr(),
            momentum: default_momentum(),
            balancer,
            seed,
            record_prelogit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if let LossKind::ClassBalanced { beta } = self.loss {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::invalid(format!(
                    "beta must lie in [0, 1), got {beta}"
                )));
            }
        }
        self.balancer.validate()
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean over batches of data loss plus the weight-decay penalty.
    pub loss: f64,
    pub lr: f64,
    /// Classifier filter norms after the epoch.
    pub norms: Vec<f64>,
}

/// Classifier weights of a 2-D pre-logit layer at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrelogitSnapshot {
    pub iteration: usize,
    pub weights: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: StageConfig,
    pub epochs: Vec<EpochTrace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prelogit: Vec<PrelogitSnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Copy with timing zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

/// `lr0 · ½ · (1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("schedule length must be at least 1"));
    }
    if t > total {
        return Err(Error::invalid(format!(
            "step {t} beyond schedule length {total}"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// `v ← μv + g; θ ← θ − lr·v`.
pub fn sgd_momentum_step(
    params: &mut Tensor2,
    grads: &Tensor2,
    velocity: &mut Tensor2,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != velocity.shape() {
        return Err(Error::invalid(format!(
            "sgd shapes differ: params {:?}, grads {:?}, velocity {:?}",
            params.shape(),
            grads.shape(),
            velocity.shape()
        )));
    }
    if !grads.is_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    for ((p, &g), v) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    if !params.is_finite() {
        return Err(Error::numeric("parameters became non-finite"));
    }
    Ok(())
}

/// Stage 1: trains every layer with cross-entropy.
pub fn train_stage1(
    model: Model,
    train: &LabeledDataset,
    cfg: &StageConfig,
) -> Result<(Model, RunReport)> {
    if cfg.trainable_layers != 0 {
        return Err(Error::invalid(
            "stage 1 trains all layers (trainable_layers = 0)",
        ));
    }
    if cfg.loss != LossKind::CrossEntropy {
        return Err(Error::invalid("stage 1 uses cross-entropy loss"));
    }
    train_stage(model, train, cfg)
}

/// Stage 2: fine-tunes the last one or two layers of a stage-1 model.
pub fn train_stage2(
    model: Model,
    train: &LabeledDataset,
    cfg: &StageConfig,
) -> Result<(Model, RunReport)> {
    if !(1..=2).contains(&cfg.trainable_layers) {
        return Err(Error::invalid(format!(
            "stage 2 trains 1 or 2 layers, got {}",
            cfg.trainable_layers
        )));
    }
    train_stage(model, train, cfg)
}

struct Velocity {
    weight: Tensor2,
    bias: Tensor2,
}

/// Runs one training stage. Layers before the trainable suffix receive no
/// gradient, no decay and no projection.
pub fn train_stage(
    mut model: Model,
    train: &LabeledDataset,
    cfg: &StageConfig,
) -> Result<(Model, RunReport)> {
    let started = Instant::now();
    cfg.validate()?;
    let n_layers = model.num_layers();
    if n_layers == 0 {
        return Err(Error::invalid("model has no layers"));
    }
    if cfg.trainable_layers > n_layers {
        return Err(Error::invalid(format!(
            "{} trainable layers requested from a {n_layers}-layer model",
            cfg.trainable_layers
        )));
    }
    if model.input_dim() != Some(train.dim()) || model.num_classes() != Some(train.num_classes()) {
        return Err(Error::invalid(format!(
            "model maps {:?} → {:?} but data has {} features and {} classes",
            model.input_dim(),
            model.num_classes(),
            train.dim(),
            train.num_classes()
        )));
    }
    let head_in = model.classifier().map_or(0, |l| l.in_dim());
    if cfg.record_prelogit && head_in != 2 {
        return Err(Error::invalid(format!(
            "pre-logit snapshots need a 2-D pre-logit layer, classifier has {head_in} inputs"
        )));
    }
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::invalid("training set is empty"));
    }

    let trainable_from = if cfg.trainable_layers == 0 {
        0
    } else {
        n_layers - cfg.trainable_layers
    };
    // MaxNorm covers the trainable head in stage 2, the classifier otherwise.
    let project_from = if cfg.trainable_layers == 2 {
        trainable_from
    } else {
        n_layers - 1
    };
    let weights = match cfg.loss {
        LossKind::CrossEntropy => ClassWeights::uniform(train.num_classes()),
        LossKind::ClassBalanced { beta } => effective_number_weights(train.class_counts(), beta)?,
    };
    let bal = &cfg.balancer;

    let mut velocity: Vec<Velocity> = model.layers()[trainable_from..]
        .iter()
        .map(|l| Velocity {
            weight: Tensor2::zeros(l.weight.rows(), l.weight.cols()),
            bias: Tensor2::zeros(1, l.bias.cols()),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut prelogit = Vec::new();
    let mut iteration = 0usize;
    if cfg.record_prelogit {
        prelogit.push(snapshot(&model, 0));
    }

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let at = |e: Error| match e {
                Error::NumericFailure(m) => {
                    Error::NumericFailure(format!("{m} (epoch {}, step {step})", epoch + 1))
                }
                other => other,
            };
            let x = train.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let (logits, vars) = model.record(&mut tape, xv, trainable_from).map_err(at)?;
            let (data_loss, seed) =
                weighted_softmax_ce(tape.value(logits), &y, &weights).map_err(at)?;
            let mut grads = tape.backward(logits, seed).map_err(at)?;

            let mut penalty = 0.0;
            for (li, (layer_vars, vel)) in vars[trainable_from..]
                .iter()
                .zip(velocity.iter_mut())
                .enumerate()
            {
                let li = li + trainable_from;
                let lv = layer_vars.expect("trainable layer has tape handles");
                let mut gw = grads.take(lv.weight).expect("weight gradient");
                let mut gb = grads.take(lv.bias).expect("bias gradient");
                let is_head = li + 1 == n_layers;
                let (decay_w, decay_b) = match bal.scope {
                    DecayScope::AllLayers => (true, true),
                    DecayScope::ClassifierOnly => (is_head, is_head && bal.include_bias),
                };
                if bal.lambda > 0.0 {
                    let layer = &model.layers()[li];
                    if decay_w {
                        gw.add_scaled(&weight_decay_grad(&layer.weight, bal.lambda), 1.0);
                        penalty += weight_decay_penalty(&layer.weight, bal.lambda);
                    }
                    if decay_b {
                        gb.add_scaled(&weight_decay_grad(&layer.bias, bal.lambda), 1.0);
                        penalty += weight_decay_penalty(&layer.bias, bal.lambda);
                    }
                }
                let layer = &mut model.layers_mut()[li];
                sgd_momentum_step(&mut layer.weight, &gw, &mut vel.weight, lr, cfg.momentum)
                    .map_err(at)?;
                sgd_momentum_step(&mut layer.bias, &gb, &mut vel.bias, lr, cfg.momentum)
                    .map_err(at)?;
            }

            match bal.constraint {
                ConstraintMode::None => {}
                ConstraintMode::MaxNorm => {
                    let delta = bal.delta.expect("validated");
                    for layer in &mut model.layers_mut()[project_from..] {
                        maxnorm_layer(layer, delta, bal.include_bias);
                    }
                }
                ConstraintMode::L2Unit => {
                    let head = model.classifier_mut().expect("non-empty model");
                    l2unit_layer(head, bal.include_bias)?;
                }
            }

            let total = data_loss + penalty;
            if !total.is_finite() {
                return Err(at(Error::numeric("training loss is not finite")));
            }
            loss_sum += total;
            batches += 1;
            iteration += 1;
        }
        epochs.push(EpochTrace {
            epoch: epoch + 1,
            loss: loss_sum / batches.max(1) as f64,
            lr,
            norms: classifier_norms(&model, bal.include_bias),
        });
        if cfg.record_prelogit {
            prelogit.push(snapshot(&model, iteration));
        }
    }

    let report = RunReport {
        config: cfg.clone(),
        epochs,
        prelogit,
        metrics: None,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

fn snapshot(model: &Model, iteration: usize) -> PrelogitSnapshot {
    let head = model.classifier().expect("non-empty model");
    PrelogitSnapshot {
        iteration,
        weights: head.weight.row_iter().map(|r| [r[0], r[1]]).collect(),
    }
}

/// `epoch,class_id,norm`, one row per class per epoch.
pub fn export_norm_trace<W: std::io::Write>(report: &RunReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "class_id", "norm"])?;
    for e in &report.epochs {
        for (k, n) in e.norms.iter().enumerate() {
            w.write_record([e.epoch.to_string(), k.to_string(), n.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `epoch,loss,lr`.
pub fn export_loss_trace<W: std::io::Write>(report: &RunReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss", "lr"])?;
    for e in &report.epochs {
        w.write_record([e.epoch.to_string(), e.loss.to_string(), e.lr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `iteration,class_id,w_x,w_y`, one row per class per snapshot.
pub fn export_prelogit_trace<W: std::io::Write>(report: &RunReport, out: W) -> Result<()> {
    if report.prelogit.is_empty() {
        return Err(Error::UnavailableTrace(
            "run was not recorded with pre-logit snapshots".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "class_id", "w_x", "w_y"])?;
    for s in &report.prelogit {
        for (k, [x, y]) in s.weights.iter().enumerate() {
            w.write_record([
                s.iteration.to_string(),
                k.to_string(),
                x.to_string(),
                y.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
