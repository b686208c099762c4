mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Multiple imputation for longitudinal and clustered data.
#[derive(Debug, Parser)]
#[command(name = "panelmi", version, about)]
pub struct Cli {
    /// Worker threads for parallel stages; 0 uses every core.
    #[arg(long, global = true, env = "PANELMI_WORKERS", default_value_t = 0)]
    pub workers: usize,
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Log level for diagnostics on stderr.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a cohort: complete.csv, observed.csv, truth.json, metadata.json.
    Sim(SimArgs),
    /// Impute a long dataset with one of the named recipes.
    Impute(ImputeArgs),
    /// Fit a mixed model to each completed dataset.
    Analyze(AnalyzeArgs),
    /// Pool fit files with Rubin's rules.
    Pool(PoolArgs),
    /// Series and autocorrelations from a sampler trace or chain statistics.
    Diag(DiagArgs),
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// JSON simulation config; absent fields keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    /// Long-format CSV with missing cells.
    #[arg(long)]
    pub input: PathBuf,
    /// Column metadata; defaults to metadata.json beside the input.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Reshape map JSON; defaults to the simulated cohort layout.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Recipe name, e.g. fcs-1l-wide or jm-2l.
    #[arg(long)]
    pub method: Option<String>,
    /// JSON config with optional `method`, `seed` and `options` fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub maxit: Option<usize>,
    #[arg(long)]
    pub nburn: Option<usize>,
    #[arg(long)]
    pub nbetween: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub donors: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub formula: String,
    /// A single CSV or a stacked imputations CSV.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Drop rows missing any model variable before fitting.
    #[arg(long)]
    pub aca: bool,
    /// Maximum likelihood instead of REML.
    #[arg(long)]
    pub ml: bool,
    /// Exit with status 4 if any fit fails to converge.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    /// Fit JSON files, or directories searched for fit_*.json.
    #[arg(required = true)]
    pub fits: Vec<PathBuf>,
    /// Exit with status 4 if any fit failed to converge.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    /// trace.csv from a joint-model run or chain_stats.csv from a chained run.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub max_lag: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
