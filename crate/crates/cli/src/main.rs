//! `headbalance`: plan and evaluate head placements for tensor-parallel decode.
//!
//! Exit codes: 0 on success, 1 on a domain error (infeasible plan, rank
//! deficient calibration, bad input file), 2 on a usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headbalance_core::WeightDistribution;

pub const WORKERS_ENV: &str = "HEADBALANCE_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "headbalance",
    version,
    about = "Balance per-head KV-cache workloads across tensor-parallel GPUs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic workload profile.
    GenProfile(GenProfileArgs),
    /// Choose per-layer head placements.
    Optimize(OptimizeArgs),
    /// Fit the decode latency law to measurements.
    Calibrate(CalibrateArgs),
    /// Simulate static allocation, rearrangement, and rearrangement with replication.
    Compare(CompareArgs),
    /// Cosine similarity of two profiles, flattened layer-major.
    Similarity(SimilarityArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenProfileArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub layers: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub heads: u64,
    /// uniform, zipf:<s> or dirichlet:<alpha>
    #[arg(long, value_parser = parse_distribution)]
    pub dist: WeightDistribution,
    /// Total workload of every layer.
    #[arg(long)]
    pub budget: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    /// Per-head KV budget to record in the profile (default: budget / heads).
    #[arg(long)]
    pub kv_budget: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub tp: u64,
    /// Extra head copies allowed per layer.
    #[arg(long, default_value_t = 0)]
    pub ch: usize,
    /// Cap on copies of any one head.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub rmax: u64,
    /// Allow GPUs to host different numbers of head copies.
    #[arg(long)]
    pub no_equal_split: bool,
    /// Search nodes per layer phase before settling for the best found.
    #[arg(long, default_value_t = headbalance_core::allocate::DEFAULT_NODE_BUDGET)]
    pub node_budget: u64,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub profile: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Delimited text with header `batch,kv_load,latency`.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub comm_alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub comm_beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub bytes_per_activation: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub profile: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Latency model file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    /// Seconds of sync overhead per extra head copy per layer.
    #[arg(long, default_value_t = 0.0)]
    pub replica_overhead: f64,
    /// Also write a per-GPU `strategy,gpu,compute_seconds,busy_rate` table.
    #[arg(long)]
    pub gpu_table: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn parse_distribution(s: &str) -> Result<WeightDistribution, String> {
    s.parse().map_err(|e: headbalance_core::ProfileError| e.to_string())
}

fn configure_workers() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var(WORKERS_ENV) {
        let threads: usize = value
            .parse()
            .map_err(|_| anyhow::anyhow!("{WORKERS_ENV} must be a positive integer, got `{value}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = configure_workers().and_then(|()| commands::run(cli.command, &args));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
