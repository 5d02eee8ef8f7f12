//! Command line front end for the mean field scheduler library.
//!
//! Exit codes: 0 success, 2 configuration or usage problems, 3 when a
//! command's built-in consistency assertions fail, 1 for anything else.
//! All outputs are deterministic in (config, seed) and independent of
//! `--workers`.

mod commands;
mod config;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use commands::RunCtx;
use config::Config;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, flags, or input files.
    Config(String),
    /// A command ran but its consistency checks failed.
    Assertion(String),
    /// Everything else (I/O, numerics).
    Other(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Assertion(msg) => write!(f, "assertion failed: {msg}"),
            CliError::Other(msg) => write!(f, "{msg}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Assertion(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "mfsched", version, about = "Mean field control for scheduler-to-queue assignment")]
struct Cli {
    /// TOML configuration file; omit for the built-in reference system.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; every run artifact is a pure function of (config, seed).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads, 0 means one per core. Never affects the outputs.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Value-iterate on the decision rule grid and write the greedy policy.
    Solve,
    /// Evaluate a policy exactly through two independent routes.
    Evaluate {
        /// `jsq`, `uniform`, or a policy file path.
        #[arg(long)]
        policy: String,
    },
    /// Monte Carlo estimate of the N-scheduler objective.
    Simulate {
        /// `jsq`, `uniform`, or a policy file path.
        #[arg(long)]
        policy: String,
        /// Comma-separated population sizes; defaults come from the config.
        #[arg(long, value_delimiter = ',')]
        n_agents: Option<Vec<usize>>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Row label in the CSV; defaults to the policy name.
        #[arg(long)]
        label: Option<String>,
    },
    /// Sweep population sizes and compare against the limit objective.
    Converge {
        /// Repeatable; defaults to `jsq` when absent.
        #[arg(long = "policy", value_name = "POLICY")]
        policies: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        n_agents: Option<Vec<usize>>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Measure concentration of the empirical state-action distribution.
    Concentration {
        #[arg(long, value_delimiter = ',')]
        n_agents: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Dual-access routing weight per buffer state (two-queue systems).
    Heatmap {
        /// `jsq`, `uniform`, or a policy file path.
        #[arg(long)]
        policy: String,
    },
    /// Compare heterogeneous policy tuples with their averaged policy.
    Averaging {
        #[arg(long, value_delimiter = ',')]
        n_agents: Option<Vec<usize>>,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = Config::load(cli.config.as_deref())?;
    let ctx = RunCtx::new(config, cli.out, cli.seed)?;
    match cli.command {
        Command::Solve => commands::solve(&ctx),
        Command::Evaluate { policy } => commands::evaluate(&ctx, &policy),
        Command::Simulate {
            policy,
            n_agents,
            episodes,
            label,
        } => commands::simulate(&ctx, &policy, n_agents, episodes, label),
        Command::Converge {
            policies,
            n_agents,
            episodes,
        } => commands::converge(&ctx, policies, n_agents, episodes),
        Command::Concentration { n_agents, trials } => {
            commands::concentration(&ctx, n_agents, trials)
        }
        Command::Heatmap { policy } => commands::heatmap(&ctx, &policy),
        Command::Averaging { n_agents, episodes } => {
            commands::averaging(&ctx, n_agents, episodes)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build();
    let pool = match pool {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot build thread pool: {e}");
            return ExitCode::from(1);
        }
    };

    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
