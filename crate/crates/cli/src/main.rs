mod commands;
mod config;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Profile;

#[derive(Parser)]
#[command(name = "vtao", version, about = "Visuo-tactile pretraining and curriculum RL for bimanual cap twisting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file layered over the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scale preset the config starts from (default desk, or the file's `profile`).
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Single-key override, e.g. `--set ppo.lr=1e-3`. Applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BottleSet {
    Seen,
    Unseen,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerKind {
    Zero,
    Random,
    Oracle,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic demonstration dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retarget a human joint trajectory onto a robot hand.
    Retarget {
        #[command(flatten)]
        common: Common,
        /// Array file of shape (frames, human dofs).
        #[arg(long)]
        human_traj: PathBuf,
        /// Built-in model name or hand spec file.
        #[arg(long, default_value = "robot24")]
        robot_model: String,
        #[arg(long, default_value = "human21")]
        human_model: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder on a dataset.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Baseline name selecting modalities and variant settings.
        #[arg(long, default_value = "VTAO")]
        ablation: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curriculum PPO on top of a frozen encoder.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: PathBuf,
        /// Label recorded with the run; must match the encoder's modalities if given.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a policy checkpoint or a reference controller.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "controller", required_unless_present = "controller")]
        policy: Option<PathBuf>,
        #[arg(long, value_enum)]
        controller: Option<ControllerKind>,
        #[arg(long, value_enum, default_value = "all")]
        bottles: BottleSet,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain, train and evaluate a list of baselines.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated baseline names.
        #[arg(long, value_delimiter = ',', required = true)]
        names: Vec<String>,
        /// Reuse an existing dataset instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison table and curves from run directories.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common, out } => commands::gen_data(&common, &out),
        Command::Retarget { common, human_traj, robot_model, human_model, out } => {
            commands::retarget(&common, &human_traj, &robot_model, &human_model, &out)
        }
        Command::Pretrain { common, data, ablation, out } => commands::pretrain(&common, &data, &ablation, &out),
        Command::Train { common, encoder, ablation, out } => commands::train(&common, &encoder, ablation.as_deref(), &out),
        Command::Eval { common, policy, controller, bottles, out } => {
            commands::eval(&common, policy.as_deref(), controller, bottles, &out)
        }
        Command::Ablate { common, names, data, out } => commands::ablate(&common, &names, data.as_deref(), &out),
        Command::Report { common: _, runs, out } => report::report(&runs, &out).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
