use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use cpl_cli::{cmd_ablate, cmd_eval, cmd_generate, cmd_train, ExperimentConfig, Overrides};
use cpl_core::replay::TrainMode;

#[derive(Parser)]
#[command(name = "cpl", version, about = "Continual video predictive learning experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Experiment file (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Overrides the seed in the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the mode in the file: cpl_full, sequential_base or joint.
    #[arg(long, global = true)]
    mode: Option<TrainMode>,
    /// Use the desk-scale profile for every value the file leaves unset.
    #[arg(long, global = true)]
    desk_scale: bool,
    /// Overwrite existing data or run directories.
    #[arg(long, global = true)]
    force: bool,
    /// Continue an interrupted run from its latest checkpoint.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Write the synthetic benchmark to frame directories.
    Generate,
    /// Train over the task sequence, evaluating all tasks after each period.
    Train,
    /// Evaluate a checkpoint and render prediction strips.
    Eval {
        /// Checkpoint file; the latest one of the configured run by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the five-row component ablation.
    Ablate,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode,
        desk_scale: cli.desk_scale,
    };
    let cfg = ExperimentConfig::load(&cli.config, &overrides)?;
    match cli.verb {
        Verb::Generate => {
            let dirs = cmd_generate(&cfg, cli.force)?;
            println!("wrote {} split directories under {}", dirs.len(), cfg.data_dir.display());
        }
        Verb::Train => {
            let state = cmd_train(&cfg, cli.resume, cli.force)?;
            print!("{}", state.matrix.to_csv());
            println!("final mean psnr {:.3}", state.matrix.final_mean_psnr().unwrap_or(f64::NAN));
        }
        Verb::Eval { checkpoint } => {
            let out = cmd_eval(&cfg, checkpoint.as_deref())?;
            for (i, s) in out.scores.iter().enumerate() {
                println!(
                    "task {}: psnr {:.3} ssim {:.4} inference accuracy {:.3}",
                    i + 1,
                    s.psnr,
                    s.ssim,
                    s.inference_accuracy
                );
            }
            println!("wrote {}", out.dir.display());
        }
        Verb::Ablate => {
            println!("row,replay,infer_k,random_k,adapt,mean_psnr,mean_ssim,inference_accuracy");
            for r in cmd_ablate(&cfg, cli.resume, cli.force)? {
                println!(
                    "{},{},{},{},{},{:.3},{:.4},{:.3}",
                    r.row, r.flags.replay, r.flags.infer_k, r.flags.random_k, r.flags.adapt, r.psnr, r.ssim, r.inference_accuracy
                );
            }
        }
    }
    Ok(())
}
