//! Two-stage pipeline runs and deterministic hyperparameter sweeps.
//!
//! A sweep enumerates points of a [`SweepSpace`] (full grid or a seeded
//! random subset), trains each distinct stage-1 and stage-2 configuration
//! exactly once, evaluates every point on the validation set, and ranks
//! the trials by mean per-class accuracy. Trials are independent and run
//! on a rayon pool; results are merged by trial index, so the leaderboard
//! does not depend on the thread count.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balancers::{apply_posthoc, BalancerConfig, ConstraintMode, PostHoc};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::Model;
use crate::trainer::{train_stage1, train_stage2, LossKind, RunReport, StageConfig};

/// Environment variable capping trial parallelism.
pub const THREADS_ENV: &str = "TAILBALANCE_THREADS";

/// Default weight-decay grid.
pub const DEFAULT_LAMBDA_GRID: [f64; 9] = [0.0, 1e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 5e-3, 1e-2];

/// Hidden widths of the MLP; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize, num_classes: usize) -> Result<Model> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(num_classes);
        Model::init(&dims, self.init_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelSpec,
    pub stage1: StageConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2: Option<StageConfig>,
}

impl PipelineConfig {
    /// Balancer of the last configured stage; its post-hoc mode and bias
    /// switch govern evaluation.
    pub fn final_balancer(&self) -> &BalancerConfig {
        &self.stage2.as_ref().unwrap_or(&self.stage1).balancer
    }
}

/// Trained models and traces of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub stage1_model: Model,
    pub final_model: Model,
    pub stage1_report: RunReport,
    pub stage2_report: Option<RunReport>,
    pub metrics: MetricsReport,
}

/// Evaluates `model` on `test` after the post-hoc transform of `balancer`.
pub fn evaluate_with(
    model: &Model,
    test: &LabeledDataset,
    train_counts: &[usize],
    balancer: &BalancerConfig,
) -> Result<MetricsReport> {
    let derived = apply_posthoc(model, balancer.posthoc, balancer.include_bias)?;
    evaluate(&derived, test, train_counts, balancer.include_bias)
}

/// Stage 1, optional stage 2, then evaluation on `test`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<PipelineOutcome> {
    let model = cfg.model.build(train.dim(), train.num_classes())?;
    let (stage1_model, stage1_report) = train_stage1(model, train, &cfg.stage1)?;
    run_from_stage1(cfg, stage1_model, stage1_report, train, test)
}

/// Continues a pipeline from an already trained stage-1 model.
pub fn run_from_stage1(
    cfg: &PipelineConfig,
    stage1_model: Model,
    stage1_report: RunReport,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<PipelineOutcome> {
    let (final_model, stage2_report) = match &cfg.stage2 {
        Some(s2) => {
            let (m, r) = train_stage2(stage1_model.clone(), train, s2)?;
            (m, Some(r))
        }
        None => (stage1_model.clone(), None),
    };
    let metrics = evaluate_with(
        &final_model,
        test,
        train.class_counts(),
        cfg.final_balancer(),
    )?;
    Ok(PipelineOutcome {
        stage1_model,
        final_model,
        stage1_report,
        stage2_report,
        metrics,
    })
}

/// Axes of a sweep. Missing axes take the base configuration's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpace {
    /// Stage-1 weight decay.
    #[serde(default = "default_lambda_axis")]
    pub lambda: Vec<f64>,
    /// Stage-2 weight decay.
    #[serde(default)]
    pub stage2_lambda: Vec<f64>,
    /// MaxNorm radius for stage 2; `null` disables MaxNorm.
    #[serde(default)]
    pub delta: Vec<Option<f64>>,
    /// Post-hoc τ applied at evaluation; 0 means none.
    #[serde(default)]
    pub tau: Vec<f64>,
    /// Class-balanced β for stage 2.
    #[serde(default)]
    pub beta: Vec<f64>,
    /// Layers fine-tuned in stage 2; 0 skips stage 2.
    #[serde(default)]
    pub trainable_layers: Vec<usize>,
    pub base: PipelineConfig,
}

fn default_lambda_axis() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}

/// One point of a [`SweepSpace`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub stage2_lambda: f64,
    pub delta: Option<f64>,
    pub tau: f64,
    pub beta: f64,
    pub trainable_layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    Grid,
    Random { n: usize, seed: u64 },
}

impl std::str::FromStr for SweepMode {
    type Err = Error;

    /// `grid` or `random:<n>:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "grid" {
            return Ok(SweepMode::Grid);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["random", n, seed] => {
                let n = n
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad random sample count {n:?}")))?;
                let seed = seed
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad random seed {seed:?}")))?;
                Ok(SweepMode::Random { n, seed })
            }
            _ => Err(Error::invalid(format!(
                "sweep mode must be grid or random:<n>:<seed>, got {s:?}"
            ))),
        }
    }
}

impl SweepSpace {
    fn axes(&self) -> Result<Axes> {
        let base2 = self.base.stage2.as_ref();
        let base_beta = match base2.map(|s| s.loss) {
            Some(LossKind::ClassBalanced { beta }) => beta,
            _ => crate::trainer::DEFAULT_BETA,
        };
        let base_tau = match self.base.final_balancer().posthoc {
            PostHoc::None => 0.0,
            PostHoc::L2 => 1.0,
            PostHoc::Tau(t) => t,
        };
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let axes = Axes {
            lambda: self.lambda.clone(),
            stage2_lambda: or(
                &self.stage2_lambda,
                base2.map_or(0.0, |s| s.balancer.lambda),
            ),
            delta: if self.delta.is_empty() {
                vec![base2.and_then(|s| s.balancer.delta)]
            } else {
                self.delta.clone()
            },
            tau: or(&self.tau, base_tau),
            beta: or(&self.beta, base_beta),
            trainable_layers: if self.trainable_layers.is_empty() {
                vec![base2.map_or(0, |s| s.trainable_layers)]
            } else {
                self.trainable_layers.clone()
            },
        };
        if axes.lambda.is_empty() {
            return Err(Error::invalid("lambda axis is empty"));
        }
        if let Some(t) = axes.trainable_layers.iter().find(|&&t| t > 2) {
            return Err(Error::invalid(format!(
                "trainable_layers axis value {t} not in 0..=2"
            )));
        }
        if axes.trainable_layers.iter().any(|&t| t > 0) && base2.is_none() {
            return Err(Error::invalid("stage-2 axes need a base stage2 config"));
        }
        Ok(axes)
    }

    /// Number of points in the full grid.
    pub fn grid_size(&self) -> Result<usize> {
        Ok(self.axes()?.len())
    }

    /// Points to run, in trial-index order.
    pub fn points(&self, mode: SweepMode) -> Result<Vec<SweepPoint>> {
        let axes = self.axes()?;
        let total = axes.len();
        match mode {
            SweepMode::Grid => Ok((0..total).map(|i| axes.point(i)).collect()),
            SweepMode::Random { n, seed } => {
                if n == 0 {
                    return Err(Error::invalid("random sweep needs at least one sample"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let idx: Vec<usize> = if n <= total {
                    rand::seq::index::sample(&mut rng, total, n).into_vec()
                } else {
                    use rand::Rng;
                    (0..n).map(|_| rng.random_range(0..total)).collect()
                };
                Ok(idx.into_iter().map(|i| axes.point(i)).collect())
            }
        }
    }

    /// Full pipeline configuration for `point`.
    pub fn config_for(&self, point: &SweepPoint) -> PipelineConfig {
        let mut cfg = self.base.clone();
        cfg.stage1.balancer.lambda = point.lambda;
        if point.trainable_layers == 0 {
            cfg.stage2 = None;
        } else if let Some(s2) = cfg.stage2.as_mut() {
            s2.trainable_layers = point.trainable_layers;
            s2.loss = LossKind::ClassBalanced { beta: point.beta };
            s2.balancer.lambda = point.stage2_lambda;
            s2.balancer.delta = point.delta;
            s2.balancer.constraint = match (point.delta, s2.balancer.constraint) {
                (Some(_), _) => ConstraintMode::MaxNorm,
                (None, ConstraintMode::MaxNorm) => ConstraintMode::None,
                (None, other) => other,
            };
        }
        let posthoc = if point.tau == 0.0 {
            PostHoc::None
        } else {
            PostHoc::Tau(point.tau)
        };
        match cfg.stage2.as_mut() {
            Some(s2) => s2.balancer.posthoc = posthoc,
            None => cfg.stage1.balancer.posthoc = posthoc,
        }
        cfg
    }
}

struct Axes {
    lambda: Vec<f64>,
    stage2_lambda: Vec<f64>,
    delta: Vec<Option<f64>>,
    tau: Vec<f64>,
    beta: Vec<f64>,
    trainable_layers: Vec<usize>,
}

impl Axes {
    fn len(&self) -> usize {
        self.lambda.len()
            * self.stage2_lambda.len()
            * self.delta.len()
            * self.tau.len()
            * self.beta.len()
            * self.trainable_layers.len()
    }

    /// Mixed-radix decode with `lambda` as the slowest axis.
    fn point(&self, mut i: usize) -> SweepPoint {
        let mut pick = |n: usize| {
            let r = i % n;
            i /= n;
            r
        };
        let tl = pick(self.trainable_layers.len());
        let beta = pick(self.beta.len());
        let tau = pick(self.tau.len());
        let delta = pick(self.delta.len());
        let l2 = pick(self.stage2_lambda.len());
        let l1 = pick(self.lambda.len());
        SweepPoint {
            lambda: self.lambda[l1],
            stage2_lambda: self.stage2_lambda[l2],
            delta: self.delta[delta],
            tau: self.tau[tau],
            beta: self.beta[beta],
            trainable_layers: self.trainable_layers[tl],
        }
    }
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub point: SweepPoint,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

impl TrialResult {
    pub fn score(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.mean_class_acc)
    }
}

/// Trials ranked by validation mean per-class accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub rows: Vec<TrialResult>,
}

impl Leaderboard {
    pub fn best(&self) -> Option<&TrialResult> {
        self.rows.first().filter(|r| r.metrics.is_some())
    }

    /// RFC 4180 CSV, best first.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "rank",
            "trial",
            "lambda",
            "stage2_lambda",
            "delta",
            "tau",
            "beta",
            "trainable_layers",
            "mean_class_acc",
            "many",
            "medium",
            "few",
            "kl_to_uniform",
            "status",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for (rank, r) in self.rows.iter().enumerate() {
            let p = &r.point;
            let m = r.metrics.as_ref();
            w.write_record([
                (rank + 1).to_string(),
                r.index.to_string(),
                p.lambda.to_string(),
                p.stage2_lambda.to_string(),
                opt(p.delta),
                p.tau.to_string(),
                p.beta.to_string(),
                p.trainable_layers.to_string(),
                opt(m.map(|m| m.mean_class_acc)),
                opt(m.and_then(|m| m.split_acc.many)),
                opt(m.and_then(|m| m.split_acc.medium)),
                opt(m.and_then(|m| m.split_acc.few)),
                opt(m.map(|m| m.kl_to_uniform)),
                r.error
                    .clone()
                    .map_or_else(|| "ok".to_string(), |e| format!("failed: {e}")),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one point end to end without caching.
pub fn run_trial(
    space: &SweepSpace,
    point: &SweepPoint,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<(PipelineConfig, MetricsReport)> {
    let cfg = space.config_for(point);
    let out = run_pipeline(&cfg, train, val)?;
    Ok((cfg, out.metrics))
}

/// Reads [`THREADS_ENV`]; `None` means use every core.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

type Key = String;

fn stage1_key(cfg: &PipelineConfig) -> Key {
    serde_json::to_string(&(&cfg.model, &cfg.stage1)).expect("config serializes")
}

fn stage2_key(cfg: &PipelineConfig) -> Key {
    let s2 = cfg.stage2.as_ref().map(|s| {
        let mut s = s.clone();
        // post-hoc transforms do not change the trained weights
        s.balancer.posthoc = PostHoc::None;
        s
    });
    serde_json::to_string(&(stage1_key(cfg), s2)).expect("config serializes")
}

/// Executes every trial of `space` and ranks them. Each distinct stage-1
/// (and stage-2) configuration is trained once and shared by the points
/// that only differ downstream of it.
pub fn sweep(
    space: &SweepSpace,
    mode: SweepMode,
    train: &LabeledDataset,
    val: &LabeledDataset,
    threads: Option<usize>,
) -> Result<Leaderboard> {
    let points = space.points(mode)?;
    let configs: Vec<PipelineConfig> = points.iter().map(|p| space.config_for(p)).collect();

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;

    pool.install(|| {
        let mut s1_jobs: BTreeMap<Key, &PipelineConfig> = BTreeMap::new();
        for c in &configs {
            s1_jobs.entry(stage1_key(c)).or_insert(c);
        }
        let s1: BTreeMap<Key, std::result::Result<Model, String>> = s1_jobs
            .into_par_iter()
            .map(|(k, c)| {
                let r = c
                    .model
                    .build(train.dim(), train.num_classes())
                    .and_then(|m| train_stage1(m, train, &c.stage1))
                    .map(|(m, _)| m)
                    .map_err(|e| e.to_string());
                (k, r)
            })
            .collect();

        let mut s2_jobs: BTreeMap<Key, &PipelineConfig> = BTreeMap::new();
        for c in &configs {
            s2_jobs.entry(stage2_key(c)).or_insert(c);
        }
        let s2: BTreeMap<Key, std::result::Result<Model, String>> = s2_jobs
            .into_par_iter()
            .map(|(k, c)| {
                let base = s1[&stage1_key(c)].clone();
                let r = base.and_then(|m| match &c.stage2 {
                    Some(s) => train_stage2(m, train, s)
                        .map(|(m, _)| m)
                        .map_err(|e| e.to_string()),
                    None => Ok(m),
                });
                (k, r)
            })
            .collect();

        let mut rows: Vec<TrialResult> = configs
            .par_iter()
            .zip(points.par_iter())
            .enumerate()
            .map(|(index, (c, p))| {
                let res = s2[&stage2_key(c)].clone().and_then(|m| {
                    evaluate_with(&m, val, train.class_counts(), c.final_balancer())
                        .map_err(|e| e.to_string())
                });
                match res {
                    Ok(m) => TrialResult {
                        index,
                        point: *p,
                        metrics: Some(m),
                        error: None,
                    },
                    Err(e) => TrialResult {
                        index,
                        point: *p,
                        metrics: None,
                        error: Some(e),
                    },
                }
            })
            .collect();

        if rows.iter().all(|r| r.metrics.is_none()) {
            return Err(Error::SweepFailed(rows.len()));
        }
        rows.sort_by(|a, b| match (a.score(), b.score()) {
            (Some(x), Some(y)) => y.total_cmp(&x).then(a.index.cmp(&b.index)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.index.cmp(&b.index),
        });
        Ok(Leaderboard { rows })
    })
}
