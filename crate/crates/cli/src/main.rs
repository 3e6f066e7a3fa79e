use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cfm_cli::commands::Command;
use cfm_cli::config::{key_listing, RawConfig, RunConfig};
use cfm_cli::CliError;

/// Flow-matching posterior inference: data generation, training, sampling
/// and evaluation against an MCMC baseline.
#[derive(Parser)]
#[command(name = "cfm", version, arg_required_else_help = true, after_help = key_listing())]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct Common {
    /// Config file of `key = value` lines under `[section]` headers.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=8e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed; overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate training tuples and write a dataset file.
    GenerateData(Common),
    /// Train the velocity field on a dataset.
    Train(Common),
    /// Draw a posterior ensemble for one problem.
    Sample(Common),
    /// Error sweep over observation counts.
    Evaluate(Common),
    /// Metropolis-Hastings baseline on the sweep problems.
    Mcmc(Common),
    /// Wall-clock of flow inference against one chain.
    Benchmark(Common),
    /// Sample trajectories and their straightness.
    Paths(Common),
}

impl Sub {
    fn split(self) -> (Command, Common) {
        match self {
            Sub::GenerateData(c) => (Command::GenerateData, c),
            Sub::Train(c) => (Command::Train, c),
            Sub::Sample(c) => (Command::Sample, c),
            Sub::Evaluate(c) => (Command::Evaluate, c),
            Sub::Mcmc(c) => (Command::Mcmc, c),
            Sub::Benchmark(c) => (Command::Benchmark, c),
            Sub::Paths(c) => (Command::Paths, c),
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut raw = match &common.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    for pair in &common.set {
        raw.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        raw.set("run.seed", &seed.to_string())?;
    }
    RunConfig::resolve(&raw)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            return ExitCode::from(code);
        }
    };
    let (command, common) = cli.command.split();
    let result = resolve(&common).and_then(|cfg| command.run(&cfg));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
