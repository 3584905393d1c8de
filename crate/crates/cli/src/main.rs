use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vecchia_cli::config::{ConfigError, ExperimentConfig};
use vecchia_cli::experiments::{
    run_estimation_study, run_fit, run_kl_grid, run_loglik, run_posterior, run_simulate,
    run_sparsity, ExperimentError, Outcome, RunOptions,
};
use vecchia_cli::output::{write_json, write_table};

#[derive(Parser)]
#[command(name = "vecchia", version, about = "General Vecchia approximations for Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw latent fields and noisy observations.
    Simulate(Common),
    /// Evaluate log-likelihoods of each method.
    Loglik(Common),
    /// Maximum likelihood for each method.
    Fit(Common),
    /// KL divergences over a grid of smoothness and signal-to-noise values.
    KlGrid(Common),
    /// Nonzeros per column of the posterior precision factor across grid sizes.
    Sparsity(Common),
    /// Replicated estimation with squared errors and MSE intervals.
    EstimationStudy(Common),
    /// Posterior mean (and optionally variances) of the latent field.
    Posterior(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured one, then `.`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Add wall-clock columns (output is then not reproducible).
    #[arg(long)]
    timing: bool,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn run(cli: Cli) -> Result<usize, Failure> {
    let (common, kind) = match &cli.command {
        Command::Simulate(c) => (c, "simulate"),
        Command::Loglik(c) => (c, "loglik"),
        Command::Fit(c) => (c, "fit"),
        Command::KlGrid(c) => (c, "kl-grid"),
        Command::Sparsity(c) => (c, "sparsity"),
        Command::EstimationStudy(c) => (c, "estimation-study"),
        Command::Posterior(c) => (c, "posterior"),
    };
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    if let Some(k) = common.threads {
        if k == 0 {
            return Err(Failure::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Failure::Run(e.to_string()))?;
    }
    let opts = RunOptions {
        timing: common.timing,
    };
    log::info!("running {kind} for scenario {}", cfg.scenario);
    let outcome: Outcome = match cli.command {
        Command::Simulate(_) => run_simulate(&cfg)?,
        Command::Loglik(_) => run_loglik(&cfg)?,
        Command::Fit(_) => run_fit(&cfg)?,
        Command::KlGrid(_) => run_kl_grid(&cfg)?,
        Command::Sparsity(_) => run_sparsity(&cfg, opts)?,
        Command::EstimationStudy(_) => run_estimation_study(&cfg)?,
        Command::Posterior(_) => run_posterior(&cfg)?,
    };
    let io = |e: std::io::Error| Failure::Run(format!("writing output: {e}"));
    for (name, table) in &outcome.tables {
        let path = write_table(&out, name, table, &cfg).map_err(io)?;
        log::info!("wrote {}", path.display());
    }
    for (name, value) in &outcome.json {
        write_json(&out, name, value).map_err(io)?;
    }
    Ok(outcome.failures)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} cell(s) failed; see the status column");
            ExitCode::from(2)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
