mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{resolve, Overrides};
use stages::{CliError, Stage};

#[derive(Parser)]
#[command(name = "talora", version, about = "Task-adaptive low-rank prompt tuning pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Parent directory of run directories.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite outputs this stage already wrote.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train and freeze the backbone on the synthetic mixture.
    PretrainBackbone(Common),
    /// Phase 1: one prompt per source task, then the mean decomposition.
    TrainBase(Common),
    /// Phase 2: shared slow weights and per-task fast weights.
    TrainTalora(Common),
    /// Phase 3: few-shot fast weights for a target task.
    AdaptTarget {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        /// Defaults to `train.shots` from the config.
        #[arg(long, value_parser = ["16", "32", "64"])]
        shots: Option<String>,
    },
    /// Unseen-data metrics of phase 1 and phase 2 on the source tasks.
    Eval(Common),
    /// Pairwise prompt similarity over the phase-1 snapshots.
    AnalyzeSim(Common),
    /// Trainable-parameter accounting.
    CountParams(Common),
    /// Collects a run directory into report.json and plot CSVs.
    Report(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (stage, common, task, shots) = match cli.command {
        Command::PretrainBackbone(c) => (Stage::Pretrain, c, None, None),
        Command::TrainBase(c) => (Stage::Base, c, None, None),
        Command::TrainTalora(c) => (Stage::Talora, c, None, None),
        Command::AdaptTarget { common, task, shots } => {
            let k = shots.map(|s| s.parse().expect("validated by clap"));
            (Stage::Adapt, common, Some(task), k)
        }
        Command::Eval(c) => (Stage::Eval, c, None, None),
        Command::AnalyzeSim(c) => (Stage::Sim, c, None, None),
        Command::CountParams(c) => (Stage::Count, c, None, None),
        Command::Report(c) => (Stage::Report, c, None, None),
    };
    let overrides = Overrides {
        seed: common.seed,
        seed_env: std::env::var("TALORA_SEED").ok(),
        out: common.out,
    };
    let resolved = resolve(&common.config, &overrides)?;
    println!("seed: {} (from {})", resolved.config.seed, resolved.seed_source);
    let run_dir = resolved.prepare_run_dir()?;
    println!("run directory: {}", run_dir.display());
    let ctx = stages::Context {
        cfg: &resolved.config,
        run_dir: &run_dir,
        force: common.force,
    };
    stages::run(stage, &ctx, task.as_deref(), shots)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code())
        }
    }
}
