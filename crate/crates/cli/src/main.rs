use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod spec;

#[derive(Debug, Parser)]
#[command(
    name = "gaussvi",
    version,
    about = "Gaussian variational inference experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every cell of an experiment grid and write trajectories and a summary.
    Run(RunArgs),
    /// Monte Carlo checks of the estimator identities and the variance comparison.
    Check(CheckArgs),
    /// First- vs second-order factor-gradient variances on a quadratic target.
    Variance(VarianceArgs),
    /// Write a synthetic logistic-regression dataset as CSV.
    Datagen(DatagenArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Overrides the spec file's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Grid cells run concurrently on this many threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Exit 0 even if some cell ends in FACTOR_FAILURE.
    #[arg(long)]
    pub keep_going: bool,
    /// Overrides the spec file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// n = 10^4 draws, d = 3 (default).
    #[arg(long, conflicts_with = "full")]
    pub quick: bool,
    /// n = 10^6 draws, d = 5.
    #[arg(long)]
    pub full: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the full report as JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum At {
    Optimum,
    Offset,
}

#[derive(Debug, Args)]
pub struct VarianceArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, value_enum, default_value_t = At::Optimum)]
    pub at: At,
    #[arg(long = "n", default_value_t = 10_000)]
    pub n_samples: usize,
    /// Overrides the spec file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the spec file's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    /// Make the first of the `d` columns an intercept.
    #[arg(long)]
    pub intercept: bool,
    #[arg(long, default_value_t = 1.0)]
    pub theta_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Completed, but a gate or a run failed.
#[derive(Debug)]
pub struct GateFailure(pub String);

impl std::fmt::Display for GateFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GateFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<GateFailure>().is_some() {
        return 1;
    }
    match err.downcast_ref::<gaussvi::Error>() {
        Some(
            gaussvi::Error::Io(_)
            | gaussvi::Error::Csv(_)
            | gaussvi::Error::Config(_)
            | gaussvi::Error::Data { .. }
            | gaussvi::Error::Schema { .. },
        )
        | None => 2,
        // numerical failures of a well-formed experiment
        Some(_) => 1,
    }
}

fn with_workers<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> anyhow::Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(gaussvi::Error::Config("--workers must be positive".into()).into());
        }
        builder = builder.num_threads(w);
    }
    Ok(builder.build()?.install(f))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => {
            let workers = a.workers;
            with_workers(workers, || commands::run(a)).and_then(|r| r)
        }
        Command::Check(a) => {
            let workers = a.workers;
            with_workers(workers, || commands::check(a)).and_then(|r| r)
        }
        Command::Variance(a) => {
            let workers = a.workers;
            with_workers(workers, || commands::variance(a)).and_then(|r| r)
        }
        Command::Datagen(a) => commands::datagen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
