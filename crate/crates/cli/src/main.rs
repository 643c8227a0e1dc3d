use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use distillwsd::config::Config;
use distillwsd::pipeline::{self, EvalSource};

/// Distil a weakly-supervised detector into a multi-label classifier.
#[derive(Debug, Parser)]
#[command(name = "distillwsd", version)]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed every random stream is derived from.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset into OUT/data.
    GenData,
    /// Train the detection teacher.
    TrainTeacher {
        /// Dataset directory (default OUT/data).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run one distillation stage.
    Distill {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Teacher checkpoint (default OUT/teacher.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stage-1 student for stage 2 (default OUT/student_stage1.ckpt).
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a student checkpoint or prediction dumps on the test split.
    Eval {
        /// Student checkpoint (default OUT/student.ckpt).
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Test-split predictions, one {"image", "scores"} object per line.
        #[arg(long, requires = "val_predictions")]
        predictions: Option<PathBuf>,
        /// Validation-split predictions used to tune the threshold.
        #[arg(long, requires = "predictions")]
        val_predictions: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare baseline, class-aware and full distillation over several seeds.
    Ablate,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let out = cli.out.as_path();
    let data_dir = |d: Option<PathBuf>| d.unwrap_or_else(|| out.join(pipeline::DATA_DIR));
    match cli.command {
        Command::GenData => {
            let dir = pipeline::cmd_gen_data(&cfg, cli.seed, out)?;
            println!("dataset written to {}", dir.display());
        }
        Command::TrainTeacher { data } => {
            let path = pipeline::cmd_train_teacher(&cfg, cli.seed, &data_dir(data), out)?;
            println!("teacher checkpoint {}", path.display());
        }
        Command::Distill { stage, checkpoint, stage1, data } => {
            let teacher = checkpoint.unwrap_or_else(|| out.join(pipeline::TEACHER_CKPT));
            let data = data_dir(data);
            let path = if stage == 1 {
                pipeline::cmd_distill_stage1(&cfg, cli.seed, &data, &teacher, out)?
            } else {
                let stage1 = stage1.unwrap_or_else(|| out.join(pipeline::STAGE1_CKPT));
                pipeline::cmd_distill_stage2(&cfg, cli.seed, &data, &teacher, &stage1, out)?
            };
            println!("student checkpoint {}", path.display());
        }
        Command::Eval { checkpoint, predictions, val_predictions, data } => {
            let source = match (predictions, val_predictions) {
                (Some(test), Some(val)) => EvalSource::Predictions { test, val },
                _ => EvalSource::Checkpoint(checkpoint.unwrap_or_else(|| out.join(pipeline::STUDENT_CKPT))),
            };
            let report = pipeline::cmd_eval(&cfg, &data_dir(data), &source, out)?;
            println!(
                "mAP {:.4}  F1-C {:.4}  F1-O {:.4}  top-{} F1-C {:.4}  F1-O {:.4}  tau {}",
                report.map, report.f1_c, report.f1_o, report.topk, report.topk_f1_c, report.topk_f1_o, report.tuned_tau
            );
        }
        Command::Ablate => {
            let report = pipeline::cmd_ablate(&cfg, cli.seed, out)
                .with_context(|| format!("ablation into {}", out.display()))?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DISTILLWSD_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
