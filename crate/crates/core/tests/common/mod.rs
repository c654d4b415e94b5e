//! Synthetic long-tail fixture shared by the integration tests.
//!
//! Values frozen from the pilot scan: separation 3, seed 2, hidden [32, 32],
//! 1000 stage-1 epochs at batch 16. In this regime the unregularized model
//! overfits the tail and its classifier norms track class counts.
#![allow(dead_code)]

use tailbalance::balancers::{BalancerConfig, ConstraintMode};
use tailbalance::data::{
    make_longtail_profile, synth_gaussian_dataset, synth_gaussian_heldout, LabeledDataset,
};
use tailbalance::harness::{ModelSpec, PipelineConfig, SweepSpace, DEFAULT_LAMBDA_GRID};
use tailbalance::trainer::{StageConfig, DEFAULT_BETA};

pub const CLASSES: usize = 10;
pub const N_MAX: usize = 200;
pub const IMBALANCE: f64 = 100.0;
pub const DIM: usize = 2;
pub const SEPARATION: f64 = 3.0;
pub const SEED: u64 = 2;
pub const HIDDEN: [usize; 2] = [32, 32];
pub const STAGE1_EPOCHS: usize = 1000;
pub const BATCH: usize = 16;
pub const VAL_PER_CLASS: usize = 100;

pub const STAGE2_LAMBDAS: [f64; 3] = [1e-3, 5e-3, 1e-2];
pub const STAGE2_DELTAS: [Option<f64>; 3] = [Some(0.5), Some(1.0), Some(2.0)];

pub struct Fixture {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn fixture() -> Fixture {
    let profile = make_longtail_profile(CLASSES, N_MAX, IMBALANCE).unwrap();
    let (train, test) = synth_gaussian_dataset(&profile, DIM, SEPARATION, SEED).unwrap();
    let val = synth_gaussian_heldout(CLASSES, DIM, SEPARATION, SEED, VAL_PER_CLASS).unwrap();
    Fixture { train, val, test }
}

/// Stage 1 with the given decay and a CB + WD + MaxNorm stage 2 on the
/// classifier.
pub fn base_config(lambda: f64) -> PipelineConfig {
    let mut stage1 = StageConfig::stage1(STAGE1_EPOCHS, lambda, SEED);
    stage1.batch_size = BATCH;
    let balancer = BalancerConfig {
        lambda: 5e-3,
        delta: Some(1.0),
        constraint: ConstraintMode::MaxNorm,
        ..Default::default()
    };
    let mut stage2 = StageConfig::stage2(1, DEFAULT_BETA, balancer, SEED);
    stage2.batch_size = BATCH;
    PipelineConfig {
        model: ModelSpec {
            hidden: HIDDEN.to_vec(),
            init_seed: SEED,
        },
        stage1,
        stage2: Some(stage2),
    }
}

pub fn naive_config() -> PipelineConfig {
    PipelineConfig {
        stage2: None,
        ..base_config(0.0)
    }
}

/// Stage-1 decay sweep, no stage 2.
pub fn lambda_space() -> SweepSpace {
    SweepSpace {
        lambda: DEFAULT_LAMBDA_GRID.to_vec(),
        stage2_lambda: vec![],
        delta: vec![],
        tau: vec![],
        beta: vec![],
        trainable_layers: vec![0],
        base: base_config(0.0),
    }
}

pub const STAGE2_BETAS: [f64; 2] = [0.999, DEFAULT_BETA];
pub const STAGE2_EPOCHS: [usize; 2] = [20, 50];
pub const STAGE2_LRS: [f64; 2] = [0.01, 0.05];

/// Stage-2 sweeps on top of a fixed stage-1 decay, one per (epochs, lr)
/// schedule; decay, radius and β are axes within each.
pub fn stage2_spaces(lambda: f64) -> Vec<SweepSpace> {
    let mut spaces = Vec::new();
    for epochs in STAGE2_EPOCHS {
        for lr in STAGE2_LRS {
            let mut base = base_config(lambda);
            let s2 = base.stage2.as_mut().unwrap();
            s2.epochs = epochs;
            s2.base_lr = lr;
            spaces.push(SweepSpace {
                lambda: vec![lambda],
                stage2_lambda: STAGE2_LAMBDAS.to_vec(),
                delta: STAGE2_DELTAS.to_vec(),
                tau: vec![],
                beta: STAGE2_BETAS.to_vec(),
                trainable_layers: vec![1],
                base,
            });
        }
    }
    spaces
}
