//! `medpt`: generate synthetic point-cloud data, train and evaluate the
//! transformer, benchmark attention cost and check gradients.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimalloc::MiMalloc;

use config::ConfigError;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "medpt", version, about = "Point-cloud transformer: data, training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving every file the command writes.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes log.csv, model.ckpt and run.cfg into --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint; writes metrics.csv into --out.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time lambda or softmax attention over a range of point counts.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated point counts.
        #[arg(long)]
        n_list: Option<String>,
        /// `lambda` or `naive`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Finite-difference check of every parameter of a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure of one invocation.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(ConfigError),
    Run(medpt::Error),
}

impl From<medpt::Error> for CliError {
    fn from(e: medpt::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Run(e) => e.code(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Run(_) => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Config(e) => e.to_string(),
            CliError::Run(e) => e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common } => commands::gen(&common),
        Command::Train { common, data } => commands::train(&common, data),
        Command::Eval { common, data, checkpoint } => commands::eval(&common, data, checkpoint),
        Command::Bench { common, n_list, mode } => commands::bench(&common, n_list, mode),
        Command::Gradcheck { common } => commands::gradcheck(&common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid usage");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("ERROR:usage:{msg}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.message().replace('\n', " ");
            eprintln!("ERROR:{}:{msg}", e.code());
            ExitCode::from(e.exit_code())
        }
    }
}
