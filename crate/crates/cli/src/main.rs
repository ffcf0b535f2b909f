//! Experiment runner for the occupancy-flow laboratory.
//!
//! ```text
//! occflow gen-scene --kind dynamic --out config.json [--rays batches.rays]
//! occflow validate --config config.json
//! occflow train --config config.json --out runs/full [--ablate no-ta] [--seed 7]
//! occflow eval --config config.json --checkpoint runs/full/checkpoint --out runs/eval
//! occflow label-rays --config config.json --out labeled.rays
//! occflow compare runs/full/metrics.csv runs/no-ta/metrics.csv [--out table.csv]
//! occflow gradcheck [--seed 3]
//! ```
//!
//! Logging level comes from the `OCCFLOW_LOG` environment variable
//! (error|info|debug, default info).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use occflow_core::experiment::{
    self, default_config, default_dynamic_scene, default_static_scene, Ablation,
    ExperimentConfig,
};
use occflow_core::label::{classify_rays, FrameMasks, MaskSet};
use occflow_core::scene::{make_batches, save_ray_batches, BatchOptions, SensorKind};

#[derive(Parser)]
#[command(name = "occflow", version, about = "Self-supervised occupancy-flow laboratory")]
struct Cli {
    /// Worker threads (default: all cores). Results are thread-count
    /// independent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    Static,
    Dynamic,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    #[value(name = "no-ta")]
    NoTa,
    #[value(name = "no-dyn-ta")]
    NoDynTa,
    #[value(name = "no-sim")]
    NoSim,
    #[value(name = "single-sdf")]
    SingleSdf,
}

impl From<AblateArg> for Ablation {
    fn from(a: AblateArg) -> Ablation {
        match a {
            AblateArg::NoTa => Ablation::NoTa,
            AblateArg::NoDynTa => Ablation::NoDynTa,
            AblateArg::NoSim => Ablation::NoSim,
            AblateArg::SingleSdf => Ablation::SingleSdf,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a default experiment config (and optionally its ray batches).
    GenScene {
        #[arg(long, value_enum, default_value = "dynamic")]
        kind: SceneKind,
        #[arg(long)]
        out: PathBuf,
        /// Also dump the generated LiDAR/camera batches to this .rays file.
        #[arg(long)]
        rays: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config file; exit 2 with a diagnostic naming the bad field.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate data, optimize the fields, evaluate, and write artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        ablate: Option<AblateArg>,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the mask-projection labeling pipeline and write labeled batches.
    LabelRays {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align metrics.csv files from several runs into one table.
    Compare {
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify adjoint gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
}

fn load_config(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(ExperimentConfig::from_json(&text)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("OCCFLOW_LOG", "info"),
    )
    .format_timestamp(None)
    .init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::GenScene { kind, out, rays, seed } => {
            let scene = match kind {
                SceneKind::Static => default_static_scene(),
                SceneKind::Dynamic => default_dynamic_scene(),
            };
            let mut cfg = default_config(scene);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            std::fs::write(&out, cfg.to_json()).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
            if let Some(rays_path) = rays {
                let oracle = cfg.scene.build()?;
                let k = cfg.window as i64;
                let t = cfg.center_frame;
                let batches = make_batches(
                    &oracle,
                    &cfg.scene.cameras,
                    cfg.scene.lidar.as_ref(),
                    (t - (k - 1))..=(t + (k - 1)),
                    cfg.seed,
                    BatchOptions {
                        samples_per_ray: cfg.schedule.samples_per_ray,
                        label_noise_rate: cfg.label_noise_rate,
                    },
                )?;
                save_ray_batches(&rays_path, &batches)?;
                println!("wrote {} ({} batches)", rays_path.display(), batches.len());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            match ExperimentConfig::from_json(&text).and_then(|c| c.validate().map(|_| c)) {
                Ok(_) => {
                    println!("ok: {}", config.display());
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("invalid config: {e}");
                    Ok(ExitCode::from(2))
                }
            }
        }
        Command::Train { config, out, seed, ablate } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.schedule.seed = s;
            }
            if let Some(a) = ablate {
                cfg.ablation = a.into();
            }
            if let Err(e) = cfg.validate() {
                eprintln!("invalid config: {e}");
                return Ok(ExitCode::from(2));
            }
            let summary = experiment::run_experiment(&cfg, &out)?;
            println!(
                "variant {}: mean RayIoU {:.4}, mAVE {:.4}, EPE3D {:.4} (range loss {:.5} -> {:.5})",
                cfg.ablation.tag(),
                summary.report.mean_iou,
                summary.report.mave,
                summary.report.epe3d,
                summary.initial_range_loss,
                summary.final_range_loss,
            );
            println!("artifacts in {}", summary.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { config, checkpoint, out } => {
            let cfg = load_config(&config)?;
            let report = experiment::eval_checkpoint(&cfg, &checkpoint, &out)?;
            for row in &report.rows {
                println!(
                    "iou@{:<5} {:.4}  (tp {} fp {} fn {})",
                    row.threshold, row.iou, row.tp, row.fp, row.fn_
                );
            }
            println!("mean RayIoU {:.4}  mAVE {:.4}  EPE3D {:.4}", report.mean_iou, report.mave, report.epe3d);
            Ok(ExitCode::SUCCESS)
        }
        Command::LabelRays { config, out } => {
            let cfg = load_config(&config)?;
            let oracle = cfg.scene.build()?;
            let k = cfg.window as i64;
            let t = cfg.center_frame;
            let mut batches = make_batches(
                &oracle,
                &[],
                cfg.scene.lidar.as_ref(),
                (t - (k - 1))..=(t + (k - 1)),
                cfg.seed,
                BatchOptions {
                    samples_per_ray: cfg.schedule.samples_per_ray,
                    label_noise_rate: cfg.label_noise_rate,
                },
            )?;
            let mut relabeled = 0usize;
            for batch in batches.iter_mut() {
                if batch.kind != SensorKind::Lidar {
                    continue;
                }
                let masks = MaskSet {
                    entries: cfg
                        .scene
                        .cameras
                        .iter()
                        .enumerate()
                        .map(|(ci, cam)| FrameMasks {
                            frame: batch.frame,
                            camera: ci,
                            masks: oracle.render_instance_masks(cam, batch.frame, 1.0),
                        })
                        .collect(),
                };
                let labels = classify_rays(
                    batch,
                    &masks,
                    &cfg.scene.cameras,
                    &oracle.ego.pose(batch.frame as f64),
                    &oracle.spec,
                );
                for (ray, label) in batch.rays.iter_mut().zip(labels) {
                    if ray.label != label {
                        relabeled += 1;
                    }
                    ray.label = label;
                }
            }
            save_ray_batches(&out, &batches)?;
            println!("wrote {} ({} labels changed)", out.display(), relabeled);
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { files, out } => {
            match experiment::compare(&files) {
                Ok((table, rows, header)) => {
                    print!("{table}");
                    if let Some(p) = out {
                        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
                        occflow_core::io::write_csv(&p, &header_refs, &rows)?;
                        println!("wrote {}", p.display());
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("compare failed: {e}");
                    Ok(ExitCode::from(2))
                }
            }
        }
        Command::Gradcheck { seed } => {
            let suite = experiment::run_gradcheck(seed)?;
            println!(
                "grids/sharpness: max relative error {:.3e} over {} slots (tolerance 1e-4)",
                suite.grids_max_rel_err, suite.grid_slots
            );
            println!(
                "flow (warp path): max relative error {:.3e} over {} slots (tolerance 1e-3)",
                suite.flow_max_rel_err, suite.flow_slots
            );
            if suite.passed() {
                println!("gradcheck PASS");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradcheck FAIL");
                Ok(ExitCode::from(1))
            }
        }
    }
}
