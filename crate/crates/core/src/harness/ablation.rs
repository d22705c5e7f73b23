//! Seeded ablation runs on a fixed generated benchmark: the full model
//! against a variant without cross-task fusion and a single-pass decoder.

use serde::{Deserialize, Serialize};

use crate::data::{generate_scene, split_seeds, ImageSample, SceneConfig};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::eval::evaluate;
use crate::harness::plot::IterationPoint;
use crate::harness::train::Trainer;
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Fusion on, configured number of iterations.
    Full,
    /// Cross-task fusion replaced by identity.
    NoFusion,
    /// Fusion on, one decoder pass.
    SingleIteration,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoFusion, Variant::SingleIteration];

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Variant::Full => {}
            Variant::NoFusion => cfg.model.decoder.use_fusion = false,
            Variant::SingleIteration => cfg.model.decoder.num_iterations = 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Shared training setup; `seed` is replaced per run.
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    /// Seed of the benchmark scenes.
    pub data_seed: u64,
    /// Total benchmark size, split into train and test.
    pub num_samples: usize,
    pub num_test: usize,
    pub variants: Vec<Variant>,
}

impl AblationConfig {
    /// Desk-scale protocol: a 64 px model, 256 scenes (192 train / 64
    /// test), 600 Adam steps per run, five seeds.
    pub fn desk() -> Self {
        let mut base = TrainConfig::default();
        let e = &mut base.model.encoder;
        e.image_size = 64;
        e.patch_size = 8;
        e.embed_dim = 32;
        e.num_blocks = 4;
        e.num_heads = 2;
        e.tap_layers = [1, 2, 3, 4];
        base.model.decoder.channels = 32;
        base.learning_rate = 5e-4;
        base.epochs = usize::MAX;
        base.max_steps = 600;
        Self {
            base,
            seeds: (0..5).collect(),
            data_seed: 20_240_601,
            num_samples: 256,
            num_test: 64,
            variants: Variant::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("ablation needs seeds and variants".into()));
        }
        if self.num_test == 0 || self.num_test >= self.num_samples {
            return Err(Error::Config(format!(
                "num_test must lie in 1..{}, got {}",
                self.num_samples, self.num_test
            )));
        }
        self.base.validate()
    }

    /// The fixed benchmark as `(train, test)`.
    pub fn benchmark(&self) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
        let scene = SceneConfig::with_size(self.base.model.image_size());
        let (train, test) = split_seeds(
            self.data_seed,
            self.num_samples - self.num_test,
            self.num_test,
        );
        let gen = |seeds: Vec<u64>| {
            seeds
                .into_iter()
                .map(|s| generate_scene(s, &scene))
                .collect::<Result<Vec<_>>>()
        };
        Ok((gen(train)?, gen(test)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub final_loss: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub runs: Vec<RunResult>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

impl AblationReport {
    pub fn runs_of(&self, variant: Variant) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    pub fn median_of(&self, variant: Variant, metric: fn(&MetricsReport) -> f64) -> Option<f64> {
        median(
            &self
                .runs_of(variant)
                .map(|r| metric(&r.report))
                .collect::<Vec<_>>(),
        )
    }

    /// Median metrics per iteration count (single pass and full), for
    /// plotting.
    pub fn iteration_points(&self) -> Vec<IterationPoint> {
        let mut pts = Vec::new();
        for (variant, n) in [
            (Variant::SingleIteration, 1),
            (Variant::Full, self.config.base.model.decoder.num_iterations),
        ] {
            let med = |f: fn(&MetricsReport) -> f64| self.median_of(variant, f);
            if let (Some(rmse), Some(mae), Some(rel), Some(iou), Some(map50)) = (
                med(|r| r.rmse),
                med(|r| r.mae),
                med(|r| r.rel),
                med(|r| r.iou),
                med(|r| r.map50),
            ) {
                pts.push(IterationPoint {
                    num_iterations: n,
                    report: MetricsReport {
                        rmse,
                        mae,
                        rel,
                        iou,
                        map50,
                        sample_count: self.config.num_test,
                    },
                });
            }
        }
        pts
    }
}

/// Trains one variant with one seed and evaluates it on the test split.
pub fn run_one(
    cfg: &AblationConfig,
    variant: Variant,
    seed: u64,
    train: &[ImageSample],
    test: &[ImageSample],
) -> Result<RunResult> {
    let mut tc = cfg.base.clone();
    tc.seed = seed;
    variant.apply(&mut tc);
    let mut trainer = Trainer::new(tc, train.to_vec())?;
    let mut final_loss = f64::NAN;
    trainer.run(
        |log| {
            final_loss = log.loss_total;
            Ok(())
        },
        |_| Ok(()),
    )?;
    let report = evaluate(trainer.model(), test, cfg.base.batch_size, false)?;
    Ok(RunResult {
        variant,
        seed,
        final_loss,
        report,
    })
}

/// Runs every variant for every seed, reporting each finished run.
pub fn run_ablation(
    cfg: &AblationConfig,
    mut on_run: impl FnMut(&RunResult),
) -> Result<AblationReport> {
    cfg.validate()?;
    let (train, test) = cfg.benchmark()?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &variant in &cfg.variants {
            let r = run_one(cfg, variant, seed, &train, &test)?;
            on_run(&r);
            runs.push(r);
        }
    }
    Ok(AblationReport {
        config: cfg.clone(),
        runs,
    })
}
