//! `rhc`: runs receding horizon control experiments from a JSON config and
//! writes CSV series, JSON summaries and a manifest to an output directory.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rhc_core::config::ExperimentConfig;
use rhc_core::Error;

#[derive(Parser, Debug)]
#[command(name = "rhc", version, about = "Receding horizon control of parabolic PDEs with random diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "configs/default.json")]
    config: PathBuf,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides `ensemble.master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; outputs are byte-identical for a fixed worker count.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Closed-loop feedback and free decay from the initial ensemble.
    Simulate,
    /// One finite-horizon optimal control problem from t = 0.
    Ocp,
    /// Receding horizon loop, horizon sweep and suboptimality report.
    Rhc,
    /// Spectral gap table beta_N.
    Beta,
    /// Empirical failure probabilities against the analytic bounds.
    Failprob,
    /// Check the config and exit without computing.
    Validate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Ocp => "ocp",
            Command::Rhc => "rhc",
            Command::Beta => "beta",
            Command::Failprob => "failprob",
            Command::Validate => "validate",
        }
    }
}

/// Failure of a command together with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, Vec<u8>), Failure> {
    let bytes = std::fs::read(&cli.config).map_err(|e| Failure {
        code: 2,
        message: format!("cannot read config {}: {e}", cli.config.display()),
    })?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Failure { code: 2, message: format!("config {} is not UTF-8", cli.config.display()) })?;
    let mut cfg = ExperimentConfig::from_json(&text)
        .map_err(|e| Failure { code: 2, message: format!("config {}: {e}", cli.config.display()) })?;
    if let Some(seed) = cli.seed {
        cfg.ensemble.master_seed = seed;
    }
    Ok((cfg, bytes))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let (cfg, bytes) = load_config(cli)?;
    if cli.command == Command::Validate {
        cfg.validate()?;
        log::info!("{}: ok", cli.config.display());
        return Ok(());
    }
    let started = Instant::now();
    let ctx = output::Context::new(
        cli.command.name(),
        &cli.config,
        &bytes,
        &cli.out,
        cfg.ensemble.master_seed,
        cli.seed.is_some(),
        cli.workers,
    )?;
    let result = match cli.command {
        Command::Simulate => commands::simulate(cfg, &ctx),
        Command::Ocp => commands::ocp(cfg, &ctx),
        Command::Rhc => commands::rhc(cfg, &ctx),
        Command::Beta => commands::beta(cfg, &ctx),
        Command::Failprob => commands::failprob(cfg, &ctx),
        Command::Validate => unreachable!(),
    };
    if ctx.has_artifacts() {
        ctx.write_manifest(started.elapsed().as_secs_f64(), result.as_ref().err())?;
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if cli.workers == 0 {
        log::error!("--workers must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
        log::error!("cannot start worker pool: {e}");
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{}", f.message);
            ExitCode::from(f.code)
        }
    }
}
