use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod estimate;
mod generate;
mod simulate;
mod util;

/// Raised by ctrl-c; the simulation driver stops scheduling new replicates.
pub static CANCEL: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(name = "netgps", version, about = "Treatment and spillover effects on networks via Bayesian generalized propensity scores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a network, covariates, treatments and outcomes.
    Generate(generate::GenerateArgs),
    /// Estimate the dose-response surface and causal effects.
    Estimate(estimate::EstimateArgs),
    /// Run simulation scenarios and report bias, RMSE and coverage.
    Simulate(simulate::SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Form {
    Linear,
    Nonlinear,
}

/// MCMC schedule overrides shared by `estimate` and `simulate`.
#[derive(Args, Clone, Default)]
pub struct McmcArgs {
    /// Total iterations per chain.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
}

impl McmcArgs {
    fn apply(&self, cfg: &mut netgps::mcmc::McmcConfig) {
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.burn_in {
            cfg.burn_in = v;
        }
        if let Some(v) = self.thin {
            cfg.thin = v;
        }
    }
}

/// Process failure with its exit code.
pub struct Failure {
    code: u8,
    message: String,
}

impl From<netgps::Error> for Failure {
    fn from(e: netgps::Error) -> Self {
        use netgps::Error as E;
        let code = match &e {
            E::Validation(_) | E::Parse { .. } | E::Csv(_) | E::Json(_) => 2,
            E::Study { .. } => 3,
            e if e.is_sampler_failure() => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn interrupted(message: impl Into<String>) -> Self {
        Failure {
            code: 130,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: format!("{}: {e}", path.display()),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn out_dir(dir: &PathBuf) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Estimate(a) => estimate::run(a),
        Command::Simulate(a) => simulate::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
