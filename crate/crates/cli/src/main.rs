//! Config-driven driver for the half-space HJB toolkit. Every subcommand
//! reads one TOML config, scales it by the resolution tier, runs, and
//! writes CSV files stamped with the config hash and effective seed.
//! Exit codes: 0 all checks passed, 1 a check failed, 2 usage or config
//! error.

mod commands;
mod config;
mod output;

use clap::{Args, Parser, Subcommand};
use commands::Ctx;
use config::{CliError, RunConfig, Tier};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hjb", about = "Half-space HJB solver and verification driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Resolution tier override: smoke, desk, or full.
    #[arg(long)]
    tier: Option<String>,
    /// Output directory for CSV files.
    #[arg(long, default_value = "out")]
    output: PathBuf,
    /// Seed override for the Monte Carlo layers.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Kernel, survival, oddness, and cross-oracle identity checks.
    KernelCheck(Common),
    /// Solve the configured semilinear problem and dump the field.
    Solve(Common),
    /// Simulate the configured policies from the first test point.
    Simulate(Common),
    /// Solve, then statistically verify policies at the test points.
    Verify(Common),
    /// Mollified-family boundary, bound, and convergence checks.
    MollifyCheck(Common),
    /// Build and verify the spatial growth example end to end.
    Growth(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::KernelCheck(c)
            | Command::Solve(c)
            | Command::Simulate(c)
            | Command::Verify(c)
            | Command::MollifyCheck(c)
            | Command::Growth(c) => c,
        }
    }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let common = cli.command.common();
    let bytes = std::fs::read(&common.config).map_err(|e| {
        config_error(format!("cannot read {}: {e}", common.config.display()))
    })?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| config_error("config file is not valid UTF-8".to_string()))?;
    let cfg = RunConfig::parse(&text)?;

    let tier = match (&common.tier, &cfg.tier) {
        (Some(t), _) => Tier::parse(t)?,
        (None, Some(t)) => Tier::parse(t)?,
        (None, None) => Tier::Desk,
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    std::fs::create_dir_all(&common.output)?;

    let ctx = Ctx {
        cfg,
        hash: output::config_hash(&bytes),
        tier,
        seed,
        out_dir: common.output.clone(),
    };
    match &cli.command {
        Command::KernelCheck(_) => commands::cmd_kernel_check(&ctx),
        Command::Solve(_) => commands::cmd_solve(&ctx),
        Command::Simulate(_) => commands::cmd_simulate(&ctx),
        Command::Verify(_) => commands::cmd_verify(&ctx),
        Command::MollifyCheck(_) => commands::cmd_mollify_check(&ctx),
        Command::Growth(_) => commands::cmd_growth(&ctx),
    }
}

fn config_error(msg: String) -> CliError {
    CliError::Config(msg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
