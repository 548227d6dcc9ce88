//! Desk-scale two-domain benchmark for comparing module switches.
//!
//! Source is domain A (random dots, dark warm style), target is domain B
//! (smooth noise, brighter cool style). Images are 64×32 with disparities
//! up to 12 px; the toy network trains on 48×24 crops.

use crate::data::{gen_synthetic_pair, D1Threshold, StereoSample, SyntheticSpec};
use crate::error::Result;
use crate::train::{evaluate, EvalReport, TrainConfig, Trainer};

pub const WIDTH: usize = 64;
pub const HEIGHT: usize = 32;
pub const MAX_TRUE_DISP: usize = 12;

/// Which modules are on for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Switches {
    pub color_transfer: bool,
    pub cost_norm: bool,
    pub recon: bool,
}

impl Switches {
    pub const BASELINE: Self = Self::new(false, false, false);
    pub const COLOR: Self = Self::new(true, false, false);
    pub const COST_NORM: Self = Self::new(false, true, false);
    pub const RECON: Self = Self::new(false, false, true);
    pub const FULL: Self = Self::new(true, true, true);

    pub const fn new(color_transfer: bool, cost_norm: bool, recon: bool) -> Self {
        Self {
            color_transfer,
            cost_norm,
            recon,
        }
    }
}

/// Rows of the ablation table, in print order.
pub const ROWS: [(&str, Switches); 5] = [
    ("baseline", Switches::BASELINE),
    ("+color", Switches::COLOR),
    ("+costnorm", Switches::COST_NORM),
    ("+recon", Switches::RECON),
    ("full", Switches::FULL),
];

/// Generated samples of both domains.
#[derive(Debug, Clone)]
pub struct DeskBenchmark {
    /// Labelled domain-A training pairs.
    pub source: Vec<StereoSample>,
    /// Domain-B training pairs; their labels are never used for training.
    pub target: Vec<StereoSample>,
    /// Held-out domain-B pairs for scoring.
    pub test: Vec<StereoSample>,
}

impl DeskBenchmark {
    /// 40 source, 20 target and 10 test pairs with fixed seeds.
    pub fn generate() -> Result<Self> {
        let a = SyntheticSpec::domain_a(WIDTH, HEIGHT, MAX_TRUE_DISP);
        let b = SyntheticSpec::domain_b(WIDTH, HEIGHT, MAX_TRUE_DISP);
        let gen = |spec: &SyntheticSpec, seeds: std::ops::Range<u64>| -> Result<Vec<StereoSample>> {
            seeds.map(|s| gen_synthetic_pair(spec, s)).collect()
        };
        Ok(Self {
            source: gen(&a, 0..40)?,
            target: gen(&b, 1000..1020)?,
            test: gen(&b, 2000..2010)?,
        })
    }
}

/// Training configuration of one benchmark run.
pub fn desk_config(switches: Switches, iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        color_transfer: switches.color_transfer,
        cost_norm: switches.cost_norm,
        recon: switches.recon,
        iterations,
        batch_size: 2,
        crop_width: 48,
        crop_height: 24,
        seed,
        eval_interval: iterations.max(1),
        eval_samples: 0,
        feature_channels: 8,
        feature_layers: 3,
        max_disp: 16,
        regularizer_layers: 2,
        occ_channels: 8,
        occ_layers: 3,
        ..TrainConfig::default()
    }
}

/// Trains one configuration and scores it on the held-out target pairs.
pub fn run(bench: &DeskBenchmark, switches: Switches, iterations: usize, seed: u64) -> Result<EvalReport> {
    let mut trainer = Trainer::new(desk_config(switches, iterations, seed), &bench.source, &bench.target)?;
    trainer.run()?;
    evaluate(&trainer.params, trainer.model(), &bench.test, D1Threshold::default())
}
