mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "active-measure",
    version,
    about = "Unbiased totals from few labels: simulate, verify, serve, replay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment and write per-t metrics.
    Simulate(SimulateArgs),
    /// Run a property-check suite; exits 1 if any check fails.
    Verify(VerifyArgs),
    /// Serve the session API (and the UI bundle, if given).
    Serve(ServeArgs),
    /// Fold a session event log into its estimate trajectory.
    Replay(ReplayArgs),
    /// Print a results file as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment file of `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Results file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// csv or jsonl.
    #[arg(long)]
    pub format: Option<String>,
    /// Comma-separated methods run on shared trial seeds.
    #[arg(long)]
    pub methods: Option<String>,
    /// Comma-separated weight schemes for the without-replacement methods.
    #[arg(long)]
    pub schemes: Option<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// bound, unbiased, streaming, coverage, weighting, baselines, variance or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Replace every Monte Carlo trial count.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write outcomes as JSON lines.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Directory of named live pool files.
    #[arg(long)]
    pub pool_dir: Option<PathBuf>,
    /// Built UI bundle served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Where session logs live.
    #[arg(long, default_value = "sessions")]
    pub data_dir: PathBuf,
    /// Keep sessions in memory only.
    #[arg(long, conflicts_with = "data_dir")]
    pub ephemeral: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Event log in JSON-lines form.
    pub log: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// jsonl (default) or csv.
    #[arg(long)]
    pub format: Option<String>,
    /// Also re-run the log through the simulation driver and require
    /// bit-identical reports.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub results: PathBuf,
    /// csv or jsonl; guessed from the extension when absent.
    #[arg(long)]
    pub format: Option<String>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("ACTIVE_MEASURE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "ACTIVE_MEASURE_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Serve(a) => commands::serve(&a),
        Command::Replay(a) => commands::replay(&a),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
