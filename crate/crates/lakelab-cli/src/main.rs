use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lakelab::cache::ValueCache;

mod commands;
mod config;
mod output;

use commands::{CliError, Context};

/// Optimal lake management: deterministic and stochastic value functions,
/// potentials and exit times.
#[derive(Parser)]
#[command(name = "lakelab", version)]
struct Cli {
    /// TOML configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides `mc.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Steady states of the state-control system.
    Equilibria,
    /// Stable manifolds of the saddles.
    Manifold,
    /// Deterministic value function and Skiba point.
    Value,
    /// Stochastic value function by policy iteration (cached).
    Hjb,
    /// Potential of the optimally controlled log-state.
    Potential,
    /// Mean exit time from the upper to the lower well.
    ExitTime,
    /// Sample optimally controlled paths.
    Simulate,
    /// Exit times along the noise ladder against the deterministic barrier.
    Arrhenius,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Equilibria => "equilibria",
            Command::Manifold => "manifold",
            Command::Value => "value",
            Command::Hjb => "hjb",
            Command::Potential => "potential",
            Command::ExitTime => "exit-time",
            Command::Simulate => "simulate",
            Command::Arrhenius => "arrhenius",
        }
    }
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = match &cli.config {
        Some(path) => config::load(path),
        None => config::parse(""),
    }
    .map_err(|e| CliError::Config(e.0))?;
    let mut settings = cfg.settings();
    if let Some(seed) = cli.seed {
        settings.mc.seed = seed;
    }
    let resolved = config::resolve(settings).map_err(|e| CliError::Config(e.0))?;
    let ctx = Context {
        out_dir: cli
            .out
            .clone()
            .or(cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
        cache: ValueCache::new(commands::cache_dir(cfg.cache_dir.as_deref())),
        resolved,
    };
    log::info!(
        "{} (config {})",
        cli.command.name(),
        &ctx.resolved.hash()[..12]
    );
    match cli.command {
        Command::Equilibria => commands::equilibria(&ctx),
        Command::Manifold => commands::manifold(&ctx),
        Command::Value => commands::value(&ctx),
        Command::Hjb => commands::hjb(&ctx),
        Command::Potential => commands::potential(&ctx),
        Command::ExitTime => commands::exit_time(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Arrhenius => commands::arrhenius(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Error
        } else {
            log::LevelFilter::Info
        })
        .parse_default_env()
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(paths) => {
            if !cli.quiet {
                for p in paths {
                    println!("{}", p.display());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lakelab {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
