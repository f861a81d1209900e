//! Command-line driver for the central-spin decoherence simulator: one
//! subcommand per experiment, a single TOML configuration with overridable
//! seed/output/format flags, and locked run directories whose manifest ties
//! every file to the configuration hash.
//!
//! Exit codes: 0 on success, 2 for configuration problems (reported with the
//! offending field's path), 3 when outputs were written but numerical
//! non-convergence was flagged, 1 for unexpected failures.

mod config;
mod experiments;
mod output;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{ConfigError, ExperimentConfig};
use output::FileFormat;

#[derive(Parser)]
#[command(
    name = "spindec",
    version,
    about = "Central electron-spin decoherence in a nuclear spin bath: \
             cluster-expansion simulation and analysis",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every simulation experiment. Command-line values override
/// the corresponding config-file fields; the configuration hash embedded in
/// the outputs reflects the resolved values.
#[derive(Args)]
struct RunArgs {
    /// Configuration file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the isotope-assignment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the cluster map (default: all cores). Results are
    /// identical for any worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Data file format: csv or json.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Hahn-echo coherence curve with a stretched-exponential envelope fit.
    #[command(alias = "hahn_echo")]
    HahnEcho(RunArgs),
    /// CPMG-N scans with a silicon-free reference and dip analysis of the
    /// difference traces.
    #[command(alias = "cpmg_scan")]
    CpmgScan(RunArgs),
    /// Free-induction decay with a Gaussian envelope fit.
    Fid(RunArgs),
    /// Echo-modulation spectrum of the configured sequence, with peak
    /// detection.
    Spectrum(RunArgs),
    /// Silicon occupancy statistics of the defect's neighborhood.
    Occupancy(RunArgs),
    /// Dipolar-limited nuclear coherence-time estimates per species.
    #[command(alias = "estimate_t2n")]
    EstimateT2n(RunArgs),
    /// Pointwise difference of two completed runs, with dip analysis of the
    /// residual.
    #[command(alias = "diff_runs")]
    DiffRuns {
        /// First run directory (minuend).
        #[arg(long)]
        a: PathBuf,
        /// Second run directory (subtrahend).
        #[arg(long)]
        b: PathBuf,
        /// Output directory for the difference run.
        #[arg(long)]
        out: PathBuf,
        /// Data file format: csv or json.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Skip the SVG plot.
        #[arg(long)]
        no_plot: bool,
    },
}

fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.directory = out.clone();
    }
    if let Some(format) = &args.format {
        FileFormat::from_name(format)?;
        cfg.output.format = format.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("cannot configure {n} worker thread(s): {e}"))?;
    }
    Ok(())
}

/// Run the selected experiment; the bool is the non-convergence flag.
fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::HahnEcho(args) => {
            init_workers(args.workers)?;
            experiments::hahn_echo(&resolve_config(&args)?)
        }
        Command::CpmgScan(args) => {
            init_workers(args.workers)?;
            experiments::cpmg_scan(&resolve_config(&args)?)
        }
        Command::Fid(args) => {
            init_workers(args.workers)?;
            experiments::fid(&resolve_config(&args)?)
        }
        Command::Spectrum(args) => {
            init_workers(args.workers)?;
            experiments::spectrum(&resolve_config(&args)?)
        }
        Command::Occupancy(args) => {
            init_workers(args.workers)?;
            experiments::occupancy(&resolve_config(&args)?)
        }
        Command::EstimateT2n(args) => {
            init_workers(args.workers)?;
            experiments::estimate_t2n(&resolve_config(&args)?)
        }
        Command::DiffRuns {
            a,
            b,
            out,
            format,
            no_plot,
        } => {
            let format = FileFormat::from_name(&format)?;
            experiments::diff_runs(&a, &b, &out, format, !no_plot)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli.command) {
        Ok(false) => 0,
        Ok(true) => 3,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("configuration error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}
