//! Acceptance checks, one line per criterion.
//!
//! `cargo test -p tailbalance-core --test acceptance` runs criteria 1-9.
//! Criterion 10 needs the CIFAR-100 binary files and about half an hour of
//! CPU; it runs only with `-- --include-ignored` and `TAILBALANCE_CIFAR_DIR`
//! pointing at a directory holding `train.bin` and `test.bin`. The same
//! variable enables the real-file half of criterion 5.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tailbalance::balancers::{
    maxnorm_project, posthoc_l2, tau_normalize, BalancerConfig, ConstraintMode,
};
use tailbalance::data::{
    assign_splits, cifar_grayscale_pool, encode_cifar100_records, imbalance_factor,
    make_longtail_profile, parse_cifar100_binary, parse_cifar100_records, subsample_longtail,
    CifarRecord, LabeledDataset, Split,
};
use tailbalance::harness::{run_pipeline, sweep, ModelSpec, PipelineConfig, SweepMode, SweepSpace};
use tailbalance::losses::{cross_entropy, effective_number_weights, weighted_softmax_ce};
use tailbalance::metrics::MetricsReport;
use tailbalance::model::{gradient_check, Model};
use tailbalance::trainer::{train_stage, StageConfig};
use tailbalance::Tensor2;

const CIFAR_ENV: &str = "TAILBALANCE_CIFAR_DIR";

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(budget: Duration, t: Instant) -> Result<Duration, String> {
    let spent = t.elapsed();
    check(
        spent < budget,
        format!("took {spent:.1?}, budget {budget:?}"),
    )?;
    Ok(spent)
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

// 1

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(2..=6)];
        for _ in 1..depth {
            dims.push(rng.random_range(2..=6));
        }
        let k = rng.random_range(2..=5);
        dims.push(k);
        let n = rng.random_range(2..=6);

        let mut model = Model::init(&dims, 1000 + case).unwrap();
        for layer in model.layers_mut() {
            let m = layer.bias.cols();
            layer.bias = random_tensor(&mut rng, 1, m, 0.5);
        }
        let x = random_tensor(&mut rng, n, dims[0], 1.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut counts: Vec<usize> = (0..k).map(|_| rng.random_range(1..=500)).collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let beta = [0.9, 0.99, 0.999, 0.9999][rng.random_range(0..4)];
        let cb = effective_number_weights(&counts, beta).unwrap();

        let ce_err = gradient_check(&model, &x, &labels, &|l, y| cross_entropy(l, y), 1e-5)
            .map_err(|e| format!("case {case} CE: {e}"))?;
        let cb_err = gradient_check(
            &model,
            &x,
            &labels,
            &|l, y| weighted_softmax_ce(l, y, &cb),
            1e-5,
        )
        .map_err(|e| format!("case {case} CB: {e}"))?;
        check(
            ce_err < 1e-5 && cb_err < 1e-5,
            format!("case {case} dims {dims:?}: CE err {ce_err:.2e}, CB err {cb_err:.2e}"),
        )?;
        worst = worst.max(ce_err).max(cb_err);
    }
    let spent = within(Duration::from_secs(30), t)?;
    Ok(format!(
        "20 MLPs x {{CE, CB}}, max rel err {worst:.2e} < 1e-5, {spent:.1?}"
    ))
}

// 2

fn projection_run(constraint: ConstraintMode) -> Result<Vec<Vec<f64>>, String> {
    let fx = common::fixture();
    let model = Model::init(&[2, 16, 10], 5).unwrap();
    let balancer = BalancerConfig {
        lambda: 1e-4,
        delta: (constraint == ConstraintMode::MaxNorm).then_some(0.5),
        constraint,
        ..Default::default()
    };
    // full-batch epochs, so each epoch is exactly one step
    let cfg = StageConfig {
        epochs: 500,
        batch_size: fx.train.len(),
        base_lr: 0.5,
        ..StageConfig::stage2(1, 0.999, balancer, 9)
    };
    let (_, report) = train_stage(model, &fx.train, &cfg).map_err(|e| e.to_string())?;
    Ok(report.epochs.into_iter().map(|e| e.norms).collect())
}

fn projection_invariants() -> Outcome {
    let t = Instant::now();
    let delta = 0.5;
    let steps = projection_run(ConstraintMode::MaxNorm)?;
    check(
        steps.len() == 500,
        format!("{} steps recorded", steps.len()),
    )?;
    let mut at_bound = 0;
    for (i, norms) in steps.iter().enumerate() {
        for (k, &n) in norms.iter().enumerate() {
            check(
                n <= delta * (1.0 + 1e-9),
                format!("maxnorm step {}: class {k} norm {n}", i + 1),
            )?;
            if n >= delta * (1.0 - 1e-9) {
                at_bound += 1;
            }
        }
    }
    check(
        at_bound > 0,
        "maxnorm never active; the run does not exercise the projection",
    )?;

    let steps = projection_run(ConstraintMode::L2Unit)?;
    let mut worst: f64 = 0.0;
    for (i, norms) in steps.iter().enumerate() {
        for (k, &n) in norms.iter().enumerate() {
            check(
                (n - 1.0).abs() <= 1e-9,
                format!("l2unit step {}: class {k} norm {n}", i + 1),
            )?;
            worst = worst.max((n - 1.0).abs());
        }
    }
    let spent = within(Duration::from_secs(30), t)?;
    Ok(format!(
        "500 steps each; maxnorm filter-steps at bound {at_bound}/5000, l2unit max |norm-1| {worst:.1e}, {spent:.1?}"
    ))
}

// 3

fn degeneracies() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for batch in 0..100 {
        let n = rng.random_range(1..=16);
        let k = rng.random_range(2..=12);
        let logits = random_tensor(&mut rng, n, k, 10.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let counts: Vec<usize> = (0..k).map(|_| rng.random_range(1..=5000)).collect();
        let w = effective_number_weights(&counts, 0.0).map_err(|e| e.to_string())?;
        let (l_cb, g_cb) = weighted_softmax_ce(&logits, &labels, &w).unwrap();
        let (l_ce, g_ce) = cross_entropy(&logits, &labels).unwrap();
        let mut diff = (l_cb - l_ce).abs();
        for (a, b) in g_cb.data().iter().zip(g_ce.data()) {
            diff = diff.max((a - b).abs());
        }
        check(
            diff <= 1e-12,
            format!("batch {batch}: CB(β=0) differs from CE by {diff:.1e}"),
        )?;
        worst = worst.max(diff);
    }

    for case in 0..50 {
        let filters = random_tensor(&mut rng, 7, 5, 3.0);
        let same = tau_normalize(&filters, 0.0).unwrap();
        let bitwise = same
            .data()
            .iter()
            .zip(filters.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        check(bitwise, format!("case {case}: τ=0 changed the filters"))?;

        let t1 = tau_normalize(&filters, 1.0).unwrap();
        let l2 = posthoc_l2(&filters).unwrap();
        for r in 0..filters.rows() {
            let row = filters.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (c, &v) in row.iter().enumerate() {
                let direct = v / norm;
                let e = (t1.get(r, c) - l2.get(r, c))
                    .abs()
                    .max((t1.get(r, c) - direct).abs());
                check(
                    e <= 1e-12,
                    format!("case {case}: τ=1 vs L2 differ by {e:.1e}"),
                )?;
            }
        }
    }

    for case in 0..1000 {
        let len = rng.random_range(1..=20);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let theta: Vec<f64> = (0..len).map(|_| rng.random_range(-scale..scale)).collect();
        let delta = 10f64.powf(rng.random_range(-2.0..2.0));
        let once = maxnorm_project(&theta, delta);
        let twice = maxnorm_project(&once, delta);
        check(
            once.iter()
                .zip(&twice)
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("case {case}: maxnorm projection not idempotent"),
        )?;
    }
    Ok(format!(
        "CB(β=0) vs CE max diff {worst:.1e} on 100 batches; τ=0 bitwise identity; τ=1 = L2; maxnorm idempotent on 1000 vectors"
    ))
}

// 4

fn dataset_construction() -> Outcome {
    let mut realized = Vec::new();
    for imbalance in [10.0, 50.0, 100.0] {
        let p = make_longtail_profile(100, 500, imbalance).map_err(|e| e.to_string())?;
        let c = p.counts();
        check(
            c.windows(2).all(|w| w[0] >= w[1]),
            format!("IF {imbalance}: counts increase"),
        )?;
        let tail = (500.0 / imbalance).round() as usize;
        check(
            c[0] == 500 && c[99] == tail,
            format!(
                "IF {imbalance}: endpoints ({}, {}) != (500, {tail})",
                c[0], c[99]
            ),
        )?;
        let got = imbalance_factor(c).unwrap();
        check(
            (got / imbalance - 1.0).abs() <= 0.05,
            format!("IF {imbalance}: realized {got}"),
        )?;
        realized.push(got);
    }
    let splits = assign_splits(&[101, 100, 20, 19]).split_of;
    check(
        splits == [Split::Many, Split::Medium, Split::Medium, Split::Few],
        format!("boundary splits {splits:?}"),
    )?;
    Ok(format!(
        "realized IF {realized:?}; splits of 101/100/20/19 = Many/Medium/Medium/Few"
    ))
}

// 5

fn cifar_dir() -> Option<PathBuf> {
    std::env::var_os(CIFAR_ENV).map(PathBuf::from)
}

fn cifar_parser() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let records: Vec<CifarRecord> = (0..2)
        .map(|i| {
            let mut pixels = Box::new([0u8; 3072]);
            rng.fill(&mut pixels[..]);
            CifarRecord {
                coarse_label: 3 + i,
                fine_label: 42 + i,
                pixels,
            }
        })
        .collect();
    let bytes = encode_cifar100_records(&records);
    let parsed = parse_cifar100_records(&bytes).map_err(|e| e.to_string())?;
    check(parsed == records, "records differ after parsing")?;
    check(
        encode_cifar100_records(&parsed) == bytes,
        "re-encoding is not byte-exact",
    )?;
    check(
        parse_cifar100_records(&bytes[..bytes.len() - 1]).is_err(),
        "truncated input accepted",
    )?;

    let real = cifar_dir()
        .map(|d| d.join("train.bin"))
        .filter(|p| p.exists());
    let Some(path) = real else {
        return Ok(format!(
            "2-record round trip byte-exact, truncation rejected; real train file check skipped (set {CIFAR_ENV})"
        ));
    };
    let data = std::fs::read(&path).map_err(|e| e.to_string())?;
    let ds = parse_cifar100_binary(&data).map_err(|e| e.to_string())?;
    check(
        ds.len() == 50_000,
        format!("real file has {} records", ds.len()),
    )?;
    check(
        ds.num_classes() == 100,
        format!("real file has {} classes", ds.num_classes()),
    )?;
    check(
        ds.class_counts().iter().all(|&c| c == 500),
        "real file is not 500 per class",
    )?;
    Ok("2-record round trip byte-exact, truncation rejected; real train file N=50000, K=100, 500/class".into())
}

// 6-8

struct Chain {
    naive: MetricsReport,
    tuned_lambda: f64,
    tuned: MetricsReport,
    final_cfg: PipelineConfig,
    final_: MetricsReport,
    naive_time: Duration,
    chain_time: Duration,
}

fn run_chain() -> Result<Chain, String> {
    let fx = common::fixture();
    let t = Instant::now();
    let naive = run_pipeline(&common::naive_config(), &fx.train, &fx.test)
        .map_err(|e| e.to_string())?
        .metrics;
    let naive_time = t.elapsed();

    // λ and the stage-2 settings are picked on the validation set
    let lambdas = common::lambda_space();
    let board =
        sweep(&lambdas, SweepMode::Grid, &fx.train, &fx.val, None).map_err(|e| e.to_string())?;
    let best = board.best().ok_or("lambda sweep produced no result")?.point;
    let tuned = run_pipeline(&lambdas.config_for(&best), &fx.train, &fx.test)
        .map_err(|e| e.to_string())?
        .metrics;

    // first best wins ties, in schedule order
    let mut pick: Option<(f64, PipelineConfig)> = None;
    for space in common::stage2_spaces(best.lambda) {
        let board =
            sweep(&space, SweepMode::Grid, &fx.train, &fx.val, None).map_err(|e| e.to_string())?;
        let top = board.best().ok_or("stage-2 sweep produced no result")?;
        let score = top.score().unwrap();
        if pick.as_ref().is_none_or(|(s, _)| score > *s) {
            pick = Some((score, space.config_for(&top.point)));
        }
    }
    let final_cfg = pick.unwrap().1;
    let final_ = run_pipeline(&final_cfg, &fx.train, &fx.test)
        .map_err(|e| e.to_string())?
        .metrics;
    Ok(Chain {
        naive,
        tuned_lambda: best.lambda,
        tuned,
        final_cfg,
        final_,
        naive_time,
        chain_time: t.elapsed(),
    })
}

fn norm_count_correlation(chain: &Result<Chain, String>) -> Outcome {
    let c = chain.as_ref().map_err(Clone::clone)?;
    let rho = c.naive.norm_count_spearman.ok_or("spearman undefined")?;
    check(rho >= 0.6, format!("spearman {rho:.3} < 0.6"))?;
    check(
        c.naive_time < Duration::from_secs(60),
        format!("naive run took {:.1?}", c.naive_time),
    )?;
    Ok(format!(
        "naive spearman(norms, counts) = {rho:.3} >= 0.6, {:.1?}",
        c.naive_time
    ))
}

fn accuracy_chain(chain: &Result<Chain, String>) -> Outcome {
    let c = chain.as_ref().map_err(Clone::clone)?;
    let (a0, a1, a2) = (
        c.naive.mean_class_acc,
        c.tuned.mean_class_acc,
        c.final_.mean_class_acc,
    );
    check(
        a0 < a1 && a1 < a2,
        format!("accuracy {a0:.4} -> {a1:.4} -> {a2:.4} not increasing"),
    )?;
    let few0 = c.naive.split_acc.few.ok_or("no few classes")?;
    let few2 = c.final_.split_acc.few.ok_or("no few classes")?;
    check(
        few2 - few0 >= 0.10,
        format!("few {few0:.4} -> {few2:.4}, gain below 10 points"),
    )?;
    check(
        c.chain_time < Duration::from_secs(180),
        format!("chain took {:.1?}", c.chain_time),
    )?;
    let s2 = c
        .final_cfg
        .stage2
        .as_ref()
        .ok_or("final config has no stage 2")?;
    Ok(format!(
        "mean acc {a0:.4} -> {a1:.4} (λ={}) -> {a2:.4} (λ2={}, δ={:?}, {:?}, {} epochs, lr {}); few {few0:.4} -> {few2:.4}; {:.1?}",
        c.tuned_lambda, s2.balancer.lambda, s2.balancer.delta, s2.loss, s2.epochs, s2.base_lr, c.chain_time
    ))
}

fn marginal_flatness(chain: &Result<Chain, String>) -> Outcome {
    let c = chain.as_ref().map_err(Clone::clone)?;
    let (k0, k2) = (c.naive.kl_to_uniform, c.final_.kl_to_uniform);
    check(k2 < k0, format!("KL final {k2:.4} >= naive {k0:.4}"))?;
    Ok(format!("KL to uniform naive {k0:.4} -> final {k2:.4}"))
}

// 9

fn determinism(chain: &Result<Chain, String>) -> Outcome {
    let cfg = chain.as_ref().map_err(Clone::clone)?.final_cfg.clone();
    let fx = common::fixture();
    let run = || -> Result<(Vec<u8>, Vec<u8>, String), String> {
        let out = run_pipeline(&cfg, &fx.train, &fx.test).map_err(|e| e.to_string())?;
        let reports = serde_json::to_string(&(
            out.stage1_report.without_timing(),
            out.stage2_report.map(|r| r.without_timing()),
            out.metrics,
        ))
        .unwrap();
        Ok((
            out.stage1_model.to_ltmc_bytes(),
            out.final_model.to_ltmc_bytes(),
            reports,
        ))
    };
    check(run()? == run()?, "two equal-seed runs differ")?;

    let space = SweepSpace {
        lambda: vec![0.0, 1e-3],
        stage2_lambda: vec![5e-3],
        delta: vec![Some(0.5), None],
        tau: vec![0.0, 1.0],
        beta: vec![],
        trainable_layers: vec![0, 1],
        base: PipelineConfig {
            model: ModelSpec {
                hidden: vec![16],
                init_seed: 4,
            },
            ..cfg
        },
    };
    let one =
        sweep(&space, SweepMode::Grid, &fx.train, &fx.val, Some(1)).map_err(|e| e.to_string())?;
    let four =
        sweep(&space, SweepMode::Grid, &fx.train, &fx.val, Some(4)).map_err(|e| e.to_string())?;
    check(one == four, "leaderboards differ between 1 and 4 threads")?;
    let mut csv1 = Vec::new();
    let mut csv4 = Vec::new();
    one.write_csv(&mut csv1).unwrap();
    four.write_csv(&mut csv4).unwrap();
    check(csv1 == csv4, "leaderboard CSVs differ")?;
    Ok(format!(
        "checkpoints and reports bit-identical across runs; {}-trial leaderboard identical at 1 and 4 threads",
        one.rows.len()
    ))
}

// 10

fn split_halves(test: &LabeledDataset) -> (LabeledDataset, LabeledDataset) {
    let mut seen = vec![0usize; test.num_classes()];
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, &y) in test.labels().iter().enumerate() {
        if seen[y].is_multiple_of(2) {
            a.push(i)
        } else {
            b.push(i)
        }
        seen[y] += 1;
    }
    (test.select(&a), test.select(&b))
}

fn scaled_cifar() -> Outcome {
    let t = Instant::now();
    let dir = cifar_dir().ok_or(format!("{CIFAR_ENV} is not set"))?;
    let load = |name: &str| -> Result<LabeledDataset, String> {
        let bytes = std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let ds = parse_cifar100_binary(&bytes).map_err(|e| e.to_string())?;
        cifar_grayscale_pool(&ds, 4).map_err(|e| e.to_string())
    };
    let full = load("train.bin")?;
    let profile = make_longtail_profile(100, 500, 100.0).unwrap();
    let train = subsample_longtail(&full, &profile, 0).map_err(|e| e.to_string())?;
    let (val, test) = split_halves(&load("test.bin")?);

    let mut stage1 = StageConfig::stage1(60, 0.0, 0);
    stage1.batch_size = 128;
    stage1.base_lr = 0.05;
    let space = SweepSpace {
        lambda: vec![0.0, 1e-4, 5e-4, 1e-3, 5e-3],
        stage2_lambda: vec![],
        delta: vec![],
        tau: vec![],
        beta: vec![],
        trainable_layers: vec![0],
        base: PipelineConfig {
            model: ModelSpec {
                hidden: vec![128, 128],
                init_seed: 0,
            },
            stage1,
            stage2: None,
        },
    };
    let board = sweep(&space, SweepMode::Grid, &train, &val, None).map_err(|e| e.to_string())?;
    let best = board.best().ok_or("sweep produced no result")?.point;
    let zero = space.points(SweepMode::Grid).unwrap()[0];
    let acc = |p| -> Result<f64, String> {
        Ok(run_pipeline(&space.config_for(&p), &train, &test)
            .map_err(|e| e.to_string())?
            .metrics
            .mean_class_acc)
    };
    let (a0, ab) = (acc(zero)?, acc(best)?);
    check(best.lambda > 0.0, "best validation λ is 0")?;
    check(
        ab - a0 >= 0.03,
        format!("λ={} gives {ab:.4} vs {a0:.4} at λ=0", best.lambda),
    )?;
    let spent = within(Duration::from_secs(1800), t)?;
    Ok(format!(
        "λ=0 {a0:.4} -> λ={} {ab:.4}, {spent:.0?}",
        best.lambda
    ))
}

fn main() -> ExitCode {
    let slow = std::env::args().any(|a| a == "--include-ignored" || a == "--ignored");
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Option<Outcome>| {
        match outcome {
            Some(Ok(detail)) => println!("criterion {n:>2} {name}: PASS ({detail})"),
            Some(Err(detail)) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({detail})");
            }
            None => println!("criterion {n:>2} {name}: SKIPPED (slow; run with -- --include-ignored and {CIFAR_ENV})"),
        }
    };

    report(1, "gradient correctness", Some(gradient_correctness()));
    report(2, "projection invariants", Some(projection_invariants()));
    report(3, "degeneracies", Some(degeneracies()));
    report(4, "dataset construction", Some(dataset_construction()));
    report(5, "cifar parser", Some(cifar_parser()));
    let chain = run_chain();
    report(
        6,
        "norm/count correlation",
        Some(norm_count_correlation(&chain)),
    );
    report(7, "accuracy chain", Some(accuracy_chain(&chain)));
    report(8, "marginal flatness", Some(marginal_flatness(&chain)));
    report(9, "determinism", Some(determinism(&chain)));
    report(10, "scaled cifar", slow.then(scaled_cifar));

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
