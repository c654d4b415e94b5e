//! Naive → tuned weight decay → class-balanced stage 2 on a synthetic
//! long-tailed Gaussian mixture, with λ and the stage-2 settings chosen on a
//! held-out balanced set.
//!
//! ```text
//! cargo run --release -p tailbalance-core --example longtail_chain -- [separation] [seed]
//! ```
//!
//! Defaults reproduce the fixture used by the acceptance tests (3.0, 2).

use std::time::Instant;

use tailbalance::balancers::{BalancerConfig, ConstraintMode};
use tailbalance::data::{make_longtail_profile, synth_gaussian_dataset, synth_gaussian_heldout};
use tailbalance::harness::{
    run_pipeline, sweep, ModelSpec, PipelineConfig, SweepMode, SweepPoint, SweepSpace,
    DEFAULT_LAMBDA_GRID,
};
use tailbalance::trainer::{StageConfig, DEFAULT_BETA};

fn main() -> tailbalance::Result<()> {
    let mut args = std::env::args().skip(1);
    let separation: f64 = args.next().map_or(3.0, |a| a.parse().expect("separation"));
    let seed: u64 = args.next().map_or(2, |a| a.parse().expect("seed"));
    let t = Instant::now();

    let profile = make_longtail_profile(10, 200, 100.0)?;
    let (train, test) = synth_gaussian_dataset(&profile, 2, separation, seed)?;
    let val = synth_gaussian_heldout(10, 2, separation, seed, 100)?;
    println!("train counts {:?}", train.class_counts());

    let balancer = BalancerConfig {
        lambda: 5e-3,
        delta: Some(1.0),
        constraint: ConstraintMode::MaxNorm,
        ..Default::default()
    };
    let base = PipelineConfig {
        model: ModelSpec {
            hidden: vec![32, 32],
            init_seed: seed,
        },
        stage1: StageConfig {
            batch_size: 16,
            ..StageConfig::stage1(1000, 0.0, seed)
        },
        stage2: Some(StageConfig {
            batch_size: 16,
            ..StageConfig::stage2(1, DEFAULT_BETA, balancer, seed)
        }),
    };

    let lambdas = SweepSpace {
        lambda: DEFAULT_LAMBDA_GRID.to_vec(),
        stage2_lambda: vec![],
        delta: vec![],
        tau: vec![],
        beta: vec![],
        trainable_layers: vec![0],
        base: base.clone(),
    };
    let board = sweep(&lambdas, SweepMode::Grid, &train, &val, None)?;
    let best = board.best().expect("at least one trial").point;
    let naive = lambdas.config_for(&lambdas.points(SweepMode::Grid)?[0]);

    // stage-2 schedule (epochs, lr) is searched too; first best wins ties
    let mut pick: Option<(f64, SweepSpace, SweepPoint)> = None;
    for epochs in [20, 50] {
        for lr in [0.01, 0.05] {
            let mut base = base.clone();
            let s2 = base.stage2.as_mut().expect("base has stage 2");
            s2.epochs = epochs;
            s2.base_lr = lr;
            let space = SweepSpace {
                lambda: vec![best.lambda],
                stage2_lambda: vec![1e-3, 5e-3, 1e-2],
                delta: vec![Some(0.5), Some(1.0), Some(2.0)],
                beta: vec![0.999, DEFAULT_BETA],
                trainable_layers: vec![1],
                base,
                ..lambdas.clone()
            };
            let board = sweep(&space, SweepMode::Grid, &train, &val, None)?;
            let top = board.best().expect("at least one trial");
            let score = top.score().unwrap_or(f64::NAN);
            if pick.as_ref().is_none_or(|(s, _, _)| score > *s) {
                pick = Some((score, space.clone(), top.point));
            }
        }
    }
    let (_, stage2, final_point) = pick.expect("at least one schedule");
    let final_cfg = stage2.config_for(&final_point);
    let schedule = final_cfg.stage2.as_ref().map(|s| (s.epochs, s.base_lr));

    for (name, cfg) in [
        ("naive", naive),
        ("tuned", lambdas.config_for(&best)),
        ("final", final_cfg),
    ] {
        let m = run_pipeline(&cfg, &train, &test)?.metrics;
        println!(
            "{name:6} mean {:.4}  many {:.3}  medium {:.3}  few {:.3}  kl {:.4}  rho {:.3}",
            m.mean_class_acc,
            m.split_acc.many.unwrap_or(f64::NAN),
            m.split_acc.medium.unwrap_or(f64::NAN),
            m.split_acc.few.unwrap_or(f64::NAN),
            m.kl_to_uniform,
            m.norm_count_spearman.unwrap_or(f64::NAN),
        );
    }
    println!(
        "tuned λ {}, stage 2 λ {} δ {:?} β {} (epochs, lr) {:?}, {:.1?}",
        best.lambda,
        final_point.stage2_lambda,
        final_point.delta,
        final_point.beta,
        schedule,
        t.elapsed()
    );
    Ok(())
}
