use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tagrl_cli::commands::{self, Artifacts, ResponderKind, TrainStage};
use tagrl_cli::config::load_config;
use tagrl_cli::error::CliError;
use tagrl_cli::lock::RunLock;

#[derive(Parser)]
#[command(name = "tagrl", version, about = "Tagged reasoning-chain training harness")]
struct Cli {
    /// Path to the run configuration file.
    #[arg(long, global = true, default_value = "configs/desk.toml")]
    config: PathBuf,

    /// Directory holding checkpoints, metrics, and reports for one run.
    #[arg(long, global = true, default_value = "runs/dev")]
    run_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a JSONL dataset with the composite reward.
    Score {
        /// Input dataset, one JSON record per line.
        #[arg(long)]
        input: PathBuf,
        /// Where to write the scored records.
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a tagged training dataset from generated rollouts.
    Pipeline,
    /// Train one stage; later stages require earlier checkpoints.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Evaluate a responder on a fresh task batch.
    Eval {
        #[arg(long, value_enum, default_value_t = ResponderArg::Policy)]
        responder: ResponderArg,
        /// Policy checkpoint to evaluate; required for the policy responder.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Label for the saved bundle; defaults per responder.
        #[arg(long)]
        name: Option<String>,
    },
    /// Collate saved evaluation bundles into one report.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Prmu,
    Sft,
    RlGuided,
    RlExplore,
}

impl From<StageArg> for TrainStage {
    fn from(value: StageArg) -> Self {
        match value {
            StageArg::Prmu => TrainStage::Prmu,
            StageArg::Sft => TrainStage::Sft,
            StageArg::RlGuided => TrainStage::RlGuided,
            StageArg::RlExplore => TrainStage::RlExplore,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum ResponderArg {
    Policy,
    Oracle,
    Uniform,
}

impl From<ResponderArg> for ResponderKind {
    fn from(value: ResponderArg) -> Self {
        match value {
            ResponderArg::Policy => ResponderKind::Policy,
            ResponderArg::Oracle => ResponderKind::Oracle,
            ResponderArg::Uniform => ResponderKind::Uniform,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.config)?;
    let _lock = RunLock::acquire(&cli.run_dir)?;
    let artifacts = Artifacts::new(cli.run_dir.clone());
    match cli.command {
        Command::Score { input, output } => {
            commands::cmd_score(&config, &artifacts, &input, &output)
        }
        Command::Pipeline => commands::cmd_pipeline(&config, &artifacts),
        Command::Train { stage } => commands::cmd_train(&config, &artifacts, stage.into()),
        Command::Eval {
            responder,
            checkpoint,
            name,
        } => commands::cmd_eval(
            &config,
            &artifacts,
            responder.into(),
            checkpoint.as_deref(),
            name.as_deref(),
        ),
        Command::Report => commands::cmd_report(&artifacts),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
