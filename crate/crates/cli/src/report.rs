//! Run-config and report files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use tailbalance::harness::{PipelineConfig, PipelineOutcome};
use tailbalance::metrics::MetricsReport;
use tailbalance::trainer::RunReport;

use crate::usage;

/// A run config: dataset paths plus the pipeline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

/// Removes `key` from a JSON object and resolves it against `base`.
pub fn take_path(v: &mut Value, key: &str, base: &Path) -> Result<PathBuf> {
    let obj = v
        .as_object_mut()
        .ok_or_else(|| usage("config must be a JSON object"))?;
    let raw = obj
        .remove(key)
        .ok_or_else(|| usage(format!("config is missing \"{key}\"")))?;
    let s = raw
        .as_str()
        .ok_or_else(|| usage(format!("\"{key}\" must be a path string")))?;
    Ok(base.join(s))
}

impl RunFile {
    /// Reads a run config. A training report is accepted too, in which
    /// case its echoed config is used.
    pub fn load(path: &Path) -> Result<Self> {
        let mut v = crate::read_json(path)?;
        if let Some(cfg) = v.get_mut("config").map(Value::take) {
            v = cfg;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let train = take_path(&mut v, "train", base)?;
        let test = take_path(&mut v, "test", base)?;
        let pipeline: PipelineConfig = serde_json::from_value(v)
            .map_err(|e| usage(format!("invalid run config {}: {e}", path.display())))
            .context("schema violation")?;
        pipeline
            .stage1
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        if let Some(s2) = &pipeline.stage2 {
            s2.validate().map_err(|e| usage(e.to_string()))?;
        }
        Ok(Self {
            train,
            test,
            pipeline,
        })
    }
}

/// JSON report written by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// Config echo with resolved dataset paths; re-runnable via `train --config`.
    pub config: RunFile,
    /// Absent when stage 1 was loaded from a checkpoint.
    pub stage1: Option<RunReport>,
    pub stage2: Option<RunReport>,
    pub metrics: MetricsReport,
}

impl PipelineReport {
    pub fn new(run: &RunFile, out: &PipelineOutcome, stage1_from_ckpt: bool) -> Self {
        let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
        Self {
            config: RunFile {
                train: abs(&run.train),
                test: abs(&run.test),
                pipeline: run.pipeline.clone(),
            },
            stage1: (!stage1_from_ckpt).then(|| out.stage1_report.clone()),
            stage2: out.stage2_report.clone(),
            metrics: out.metrics.clone(),
        }
    }
}
