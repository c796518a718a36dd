//! `fsdet`: prepare data splits, train, fine-tune, evaluate and plot.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad input, 3 not enough
//! annotations for the requested k, 4 missing prerequisite artifact.

mod commands;
mod config;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fsdet", version, about = "Few-shot object detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// Run configuration (flat TOML key = value document).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic-shapes dataset to data.root.
    Fixture(ConfigArgs),
    /// Split classes and images; write split and k-shot manifests.
    Prepare(ConfigArgs),
    /// Train on the base classes.
    TrainBase(ConfigArgs),
    /// Fine-tune on the k-shot set over base and novel classes.
    Finetune(ConfigArgs),
    /// Score fine-tuned models on the test partition.
    Eval(ConfigArgs),
    /// Draw charts from the evaluation grid.
    Plot(ConfigArgs),
    /// List the accepted configuration keys.
    Keys,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<fsdet_core::Error> for CliError {
    fn from(e: fsdet_core::Error) -> Self {
        use fsdet_core::Error as E;
        let code = match &e {
            E::Capacity { .. } => 3,
            E::MissingArtifact(_) => 4,
            E::Shape(_)
            | E::Domain(_)
            | E::Usage(_)
            | E::Config(_)
            | E::Parse { .. }
            | E::Vocabulary { .. }
            | E::Sampling(_) => 2,
            E::NonFiniteLoss { .. } | E::Checkpoint(_) | E::Io(_) | E::Image(_) | E::Json(_) => 1,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::other(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |args: &ConfigArgs| {
        let table = config::load_table(&args.config, &args.overrides)?;
        config::RunConfig::from_table(table, std::env::var_os("FSDET_OUT").map(PathBuf::from))
    };
    match cli.command {
        Command::Keys => {
            for (key, default, help) in config::SCHEMA {
                println!("{key:<24} {:<10} {help}", default.unwrap_or("-"));
            }
            Ok(())
        }
        Command::Fixture(a) => commands::fixture(&load(&a)?),
        Command::Prepare(a) => commands::prepare(&load(&a)?),
        Command::TrainBase(a) => commands::train_base(&load(&a)?),
        Command::Finetune(a) => commands::finetune(&load(&a)?),
        Command::Eval(a) => commands::eval(&load(&a)?),
        Command::Plot(a) => commands::plot(&load(&a)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fsdet: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
