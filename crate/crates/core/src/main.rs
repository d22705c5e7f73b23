use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use monofuse::data::{
    generate_scene, load_dataset, save_dataset, split_seeds, DatasetMeta, SceneConfig,
};
use monofuse::harness::ablation::{run_ablation, AblationConfig};
use monofuse::harness::checkpoint::Checkpoint;
use monofuse::harness::config::TrainConfig;
use monofuse::harness::eval::evaluate;
use monofuse::harness::plot::plot_file;
use monofuse::harness::predict::predict_file;
use monofuse::harness::train::Trainer;
use monofuse::{Error, Result};

#[derive(Parser)]
#[command(
    name = "monofuse",
    version,
    about = "Joint monocular depth and segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of transparent-object scenes.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 96)]
        image_size: usize,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` settings applied after the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score the ground truth against itself (harness self-test).
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
    /// Predict depth and segmentation for one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the seeded fusion/iteration ablation on the generated benchmark.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Number of seeds (0, 1, ...).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// `key=value` training settings applied to every run.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Render a training log or an iteration sweep report as SVG figures.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            count,
            seed,
            image_size,
        } => {
            let cfg = SceneConfig::with_size(image_size);
            let (seeds, _) = split_seeds(seed, count, 0);
            let samples = seeds
                .iter()
                .map(|&s| generate_scene(s, &cfg))
                .collect::<Result<Vec<_>>>()?;
            save_dataset(&out, &samples, &DatasetMeta::new(image_size, 2))?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train {
            config,
            overrides,
            resume,
        } => {
            let mut trainer = match resume {
                Some(path) => {
                    let ck = Checkpoint::load(&path)?;
                    let cfg = &ck.meta.config;
                    let data = load_dataset(&cfg.data_dir, Some(cfg.model.image_size()))?;
                    Trainer::resume(&ck, data)?
                }
                None => {
                    let cfg = TrainConfig::load(&config, &overrides)?;
                    let data = load_dataset(&cfg.data_dir, Some(cfg.model.image_size()))?;
                    Trainer::new(cfg, data)?
                }
            };
            let last = trainer.fit()?;
            println!(
                "trained {} steps over {} epochs; checkpoint {}",
                trainer.global_step(),
                trainer.epoch(),
                last.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            out,
            oracle,
            batch_size,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.build_model()?;
            let samples = load_dataset(&data, Some(model.config().image_size()))?;
            let report = evaluate(&model, &samples, batch_size, oracle)?;
            let json = serde_json::to_string_pretty(&report)?;
            std::fs::write(&out, format!("{json}\n")).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            println!("{json}");
        }
        Command::Predict { ckpt, image, out } => {
            let model = Checkpoint::load(&ckpt)?.build_model()?;
            let res = predict_file(&model, &image, &out)?;
            for p in [&res.depth_path, &res.mask_path, &res.vis_path] {
                println!("{}", p.display());
            }
        }
        Command::Ablate {
            out,
            seeds,
            overrides,
        } => {
            let mut cfg = AblationConfig::desk();
            cfg.seeds = (0..seeds).collect();
            for o in &overrides {
                cfg.base.apply_override(o)?;
            }
            let report = run_ablation(&cfg, |r| {
                println!(
                    "{:?} seed {}: rmse {:.4} iou {:.4} map50 {:.2} (final loss {:.4})",
                    r.variant, r.seed, r.report.rmse, r.report.iou, r.report.map50, r.final_loss
                )
            })?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            for (name, json) in [
                ("ablation.json", serde_json::to_string_pretty(&report)?),
                (
                    "iterations.json",
                    serde_json::to_string_pretty(&report.iteration_points())?,
                ),
            ] {
                let path = out.join(name);
                std::fs::write(&path, json).map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Plot { input, out } => {
            for p in plot_file(&input, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
