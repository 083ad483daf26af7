mod commands;
mod example5;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Spectral-shift solver and certifier for stochastic LQ problems with
/// binary controls on exact scenario trees.
#[derive(Parser, Debug)]
#[command(name = "lqshift", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Tolerance for checkers and iterative solvers.
    #[arg(long, global = true, default_value_t = 1e-8)]
    pub tol: f64,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Override the instance depth (constant coefficients only).
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    /// Leave wall-clock timings out of reports.
    #[arg(long, global = true)]
    pub no_timings: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse and validate an instance file.
    Validate {
        instance: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Largest eigenvalue of N and the shift μ.
    Spectrum {
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Dense)]
        mode: Mode,
        #[arg(long, default_value_t = lqshift::spectral::DEFAULT_MAX_ITER)]
        max_iter: usize,
        /// Write the full dense spectrum here (dense mode only).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimal binary control: brute force within budget, else MSA.
    Solve {
        instance: PathBuf,
        #[arg(long, default_value_t = lqshift::oracle::DEFAULT_BUDGET)]
        budget: u128,
        /// MSA iteration cap, used when brute force exceeds the budget.
        #[arg(long)]
        msa: Option<usize>,
        /// Number of seeded random MSA starts.
        #[arg(long, default_value_t = 1)]
        starts: usize,
        /// Control CSV; defaults to a sidecar next to --out.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Maximum-principle checks for a given binary control.
    Verify {
        instance: PathBuf,
        #[arg(long)]
        control: PathBuf,
        /// `auto` (−λ_max) or a number.
        #[arg(long, default_value = "auto", allow_hyphen_values = true)]
        mu: String,
        /// Also solve the second-order adjoint and check the general principle.
        #[arg(long)]
        second_order: bool,
        /// Where to write P; defaults to a sidecar next to --out.
        #[arg(long)]
        p_csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certificate that the binary and shifted relaxed problems agree.
    Equivalence {
        instance: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = lqshift::oracle::DEFAULT_BUDGET)]
        budget: u128,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline on the built-in one-dimensional example.
    Example5 {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        depths: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Dense,
    Power,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
