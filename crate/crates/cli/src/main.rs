use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simoe_cli::config::parse_policies;
use simoe_cli::{auc_probe, parse_config, simulate, CliError, ExperimentManifest, Overrides};

#[derive(Parser)]
#[command(name = "simoe", version, about = "Similarity-aware prompt routing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sweep and write its artifacts.
    Simulate(RunArgs),
    /// Measure how well each scorer separates seen from unseen tasks.
    AucProbe(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Run seed; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Comma-separated fractions of each task's training split.
    #[arg(long, value_delimiter = ',')]
    data_fraction: Vec<f64>,
    /// Comma-separated policies: adaptive, global, task_specific.
    #[arg(long)]
    policy: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail instead of using the default seed.
    #[arg(long)]
    strict: bool,
}

fn manifest(args: &RunArgs) -> Result<ExperimentManifest, CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| CliError::Io {
        path: args.config.clone(),
        source: e,
    })?;
    let mut m = parse_config(&text).map_err(|e| match e {
        CliError::Config { line, msg } => CliError::Usage(format!("{}:{line}: {msg}", args.config.display())),
        other => other,
    })?;
    let policies = match &args.policy {
        Some(p) => parse_policies(p).map_err(|e| CliError::Usage(format!("--policy: {e}")))?,
        None => Vec::new(),
    };
    Overrides {
        seeds: args.seeds.clone(),
        data_fractions: args.data_fraction.clone(),
        policies,
        out: args.out.clone(),
        strict: args.strict,
    }
    .apply(&mut m)?;
    Ok(m)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let m = manifest(&args)?;
            let table = simulate(&m)?;
            print!("{table}");
        }
        Command::AucProbe(args) => {
            let m = manifest(&args)?;
            let table = auc_probe(&m)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
