//! `tailbalance` command-line interface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use tailbalance::balancers::PostHoc;
use tailbalance::data::{
    cifar_grayscale_pool, imbalance_factor, make_longtail_profile, parse_cifar100_binary,
    subsample_longtail, synth_gaussian_dataset, LabeledDataset,
};
use tailbalance::harness::{
    evaluate_with, run_from_stage1, run_pipeline, sweep, threads_from_env, SweepMode, SweepSpace,
};
use tailbalance::metrics::write_per_class_csv;
use tailbalance::trainer::{
    export_loss_trace, export_norm_trace, export_prelogit_trace, RunReport,
};
use tailbalance::Model;

mod report;

use report::{PipelineReport, RunFile};

#[derive(Parser)]
#[command(
    name = "tailbalance",
    version,
    about = "Weight balancing for long-tailed classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a long-tailed synthetic Gaussian dataset.
    GenData {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n_max: usize,
        #[arg(long = "if")]
        imbalance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        /// Training set output (LTDS).
        #[arg(long)]
        out: PathBuf,
        /// Balanced test set output (LTDS).
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Convert a CIFAR-100 binary file to LTDS.
    ParseCifar {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grayscale and average-pool by this factor (e.g. 4 gives 8×8).
        #[arg(long)]
        pool: Option<usize>,
        /// Subsample to a long-tailed profile with this imbalance factor.
        #[arg(long = "if")]
        imbalance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the two-stage pipeline described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Skip stage 1 and start stage 2 from this checkpoint.
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
        /// Also save the stage-1 model here.
        #[arg(long)]
        stage1_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training set, for Many/Medium/Few splits and the norm diagnostic.
        #[arg(long)]
        train: Option<PathBuf>,
        /// none, l2 or tau:<value>
        #[arg(long, default_value = "none")]
        posthoc: String,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-class accuracy / marginal likelihood CSV.
        #[arg(long)]
        per_class_csv: Option<PathBuf>,
    },
    /// Run a hyperparameter sweep and write the leaderboard.
    Sweep {
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// grid or random:<n>:<seed>
        #[arg(long, default_value = "grid")]
        mode: String,
    },
    /// Export CSV traces from a training report.
    ExportTrace {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        kind: TraceKind,
        /// Stage to export; defaults to the last one trained.
        #[arg(long)]
        stage: Option<u8>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceKind {
    Norms,
    Loss,
    Prelogit,
}

/// Errors caused by bad input rather than by a failed run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
        {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<tailbalance::Error>() {
            return if e.is_input_error() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("tailbalance: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("tailbalance: {line}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_csv_file(
    path: &Path,
    f: impl FnOnce(&mut fs::File) -> tailbalance::Result<()>,
) -> Result<()> {
    let mut file =
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f(&mut file)?;
    file.flush()?;
    Ok(())
}

/// `println!` that treats a closed stdout (e.g. piped into `head`) as done.
macro_rules! say {
    ($($arg:tt)*) => {
        match writeln!(std::io::stdout(), $($arg)*) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e)?,
            _ => {}
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            k,
            n_max,
            imbalance,
            seed,
            dim,
            separation,
            out,
            test_out,
        } => {
            let profile = make_longtail_profile(k, n_max, imbalance)?;
            let (train, test) = synth_gaussian_dataset(&profile, dim, separation, seed)?;
            train.save(&out)?;
            if let Some(p) = test_out {
                test.save(&p)?;
            }
            say!(
                "realized imbalance factor: {}",
                imbalance_factor(train.class_counts())?
            );
        }
        Command::ParseCifar {
            input,
            out,
            pool,
            imbalance,
            seed,
        } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let mut data = parse_cifar100_binary(&bytes)?;
            if let Some(f) = pool {
                data = cifar_grayscale_pool(&data, f)?;
            }
            if let Some(imb) = imbalance {
                let n_max = data.class_counts().iter().copied().min().unwrap_or(0);
                let profile = make_longtail_profile(data.num_classes(), n_max, imb)?;
                data = subsample_longtail(&data, &profile, seed)?;
                say!(
                    "realized imbalance factor: {}",
                    imbalance_factor(data.class_counts())?
                );
            }
            data.save(&out)?;
            say!(
                "{} examples, {} features, {} classes",
                data.len(),
                data.dim(),
                data.num_classes()
            );
        }
        Command::Train {
            config,
            stage1_ckpt,
            stage1_out,
            out,
            report,
        } => {
            let run = RunFile::load(&config)?;
            let train = load_dataset(&run.train)?;
            let test = load_dataset(&run.test)?;
            let outcome = match &stage1_ckpt {
                Some(p) => {
                    if run.pipeline.stage2.is_none() {
                        bail!(usage("--stage1-ckpt needs a config with a stage2 section"));
                    }
                    let m = Model::load(p)
                        .with_context(|| format!("reading checkpoint {}", p.display()))?;
                    let placeholder = RunReport {
                        config: run.pipeline.stage1.clone(),
                        epochs: Vec::new(),
                        prelogit: Vec::new(),
                        metrics: None,
                        wall_time_secs: 0.0,
                    };
                    run_from_stage1(&run.pipeline, m, placeholder, &train, &test)?
                }
                None => run_pipeline(&run.pipeline, &train, &test)?,
            };
            outcome.final_model.save(&out)?;
            if let Some(p) = stage1_out {
                outcome.stage1_model.save(&p)?;
            }
            let rep = PipelineReport::new(&run, &outcome, stage1_ckpt.is_some());
            if let Some(p) = report {
                write_json(&p, &rep)?;
            }
            let m = &outcome.metrics;
            say!(
                "mean per-class accuracy {:.4} (many {}, medium {}, few {})",
                m.mean_class_acc,
                fmt_opt(m.split_acc.many),
                fmt_opt(m.split_acc.medium),
                fmt_opt(m.split_acc.few)
            );
        }
        Command::Eval {
            ckpt,
            data,
            train,
            posthoc,
            report,
            per_class_csv,
        } => {
            let posthoc: PostHoc = posthoc
                .parse()
                .map_err(|e: tailbalance::Error| usage(e.to_string()))?;
            let model = Model::load(&ckpt)
                .with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
            let test = load_dataset(&data)?;
            // without training counts every class lands in the same split
            let counts = match &train {
                Some(p) => load_dataset(p)?.class_counts().to_vec(),
                None => vec![0; test.num_classes()],
            };
            let balancer = tailbalance::balancers::BalancerConfig {
                posthoc,
                ..Default::default()
            };
            let mut metrics = evaluate_with(&model, &test, &counts, &balancer)?;
            if train.is_none() {
                metrics.split_acc.few = None;
                metrics.norm_count_spearman = None;
            }
            if let Some(p) = per_class_csv {
                write_csv_file(&p, |f| write_per_class_csv(&metrics, &counts, f))?;
            }
            match report {
                Some(p) => write_json(&p, &metrics)?,
                None => say!("{}", serde_json::to_string_pretty(&metrics)?),
            }
        }
        Command::Sweep { space, out, mode } => {
            let mode: SweepMode = mode
                .parse()
                .map_err(|e: tailbalance::Error| usage(e.to_string()))?;
            let mut v = read_json(&space)?;
            let base_dir = space.parent().unwrap_or(Path::new("."));
            let train = report::take_path(&mut v, "train", base_dir)?;
            let val = report::take_path(&mut v, "val", base_dir)?;
            let space: SweepSpace = serde_json::from_value(v)
                .map_err(|e| usage(format!("invalid sweep space {}: {e}", space.display())))?;
            let train = load_dataset(&train)?;
            let val = load_dataset(&val)?;
            let board = sweep(&space, mode, &train, &val, threads_from_env())?;
            write_csv_file(&out, |f| board.write_csv(f))?;
            if let Some(best) = board.best() {
                say!(
                    "best trial {} (mean per-class accuracy {:.4})",
                    best.index,
                    best.score().unwrap_or(f64::NAN)
                );
            }
            let failed = board.rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} trial(s) failed");
            }
        }
        Command::ExportTrace {
            report,
            kind,
            stage,
            out,
        } => {
            let v = read_json(&report)?;
            let rep: PipelineReport = serde_json::from_value(v)
                .map_err(|e| usage(format!("invalid report {}: {e}", report.display())))?;
            let run = match stage {
                Some(1) => rep.stage1.as_ref(),
                Some(2) => rep.stage2.as_ref(),
                Some(s) => bail!(usage(format!("stage must be 1 or 2, got {s}"))),
                None => rep.stage2.as_ref().or(rep.stage1.as_ref()),
            }
            .ok_or_else(|| {
                anyhow!(tailbalance::Error::UnavailableTrace(
                    "requested stage was not run".into()
                ))
            })?;
            match kind {
                TraceKind::Norms => write_csv_file(&out, |f| export_norm_trace(run, f))?,
                TraceKind::Loss => write_csv_file(&out, |f| export_loss_trace(run, f))?,
                TraceKind::Prelogit => {
                    // check before creating the output file
                    export_prelogit_trace(run, std::io::sink())?;
                    write_csv_file(&out, |f| export_prelogit_trace(run, f))?
                }
            }
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}
