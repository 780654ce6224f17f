mod commands;
mod config;
mod dataset;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::FlagOverrides;
use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "ovseg",
    version,
    about = "Open-vocabulary panoptic segmentation on precomputed features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads for image-level parallelism.
    #[arg(long, default_value_t = 1, value_name = "N")]
    jobs: usize,
    /// Overrides `seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overrides `paths.out`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides one configuration key; the value is parsed as JSON, or
    /// taken as a string when it is not valid JSON.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Predict a panoptic map and debug record for every image.
    Infer(Common),
    /// Score predictions against ground truth (PQ family and mIoU).
    Evaluate(Common),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(Common),
    /// K-means cluster maps of both feature streams.
    Cluster(Common),
    /// Write a synthetic dataset to the output directory.
    Synth(Common),
}

fn run(command: &Command) -> Result<(), CliError> {
    let (Command::Infer(common)
    | Command::Evaluate(common)
    | Command::Gradcheck(common)
    | Command::Cluster(common)
    | Command::Synth(common)) = command;
    if common.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let flags = FlagOverrides {
        seed: common.seed,
        out: common.out.clone(),
        sets: common.sets.clone(),
    };
    let cfg = config::load(common.config.as_deref(), &flags)?;
    let jobs = common.jobs;
    match command {
        Command::Infer(_) => commands::infer(&cfg, jobs),
        Command::Evaluate(_) => commands::evaluate(&cfg, jobs).map(|_| ()),
        Command::Gradcheck(_) => commands::gradcheck(&cfg),
        Command::Cluster(_) => commands::cluster(&cfg, jobs).map(|_| ()),
        Command::Synth(_) => commands::synth(&cfg, jobs),
    }
}

fn main() -> ExitCode {
    let help = config::help_text();
    let cmd = Cli::command().mut_subcommands(|s| s.after_help(help.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
