//! `roed` binary: thin argument layer over the driver library.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "roed",
    version,
    about = "Budget-constrained robust sensor placement for PDE-governed inverse problems"
)]
struct Cli {
    /// Log filter (error, warn, info, debug, trace); RUST_LOG overrides.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    /// Size of the global worker pool; defaults to the core count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to $ROED_OUT_DIR, then ./roed_out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the optimization and write results.json + trajectory.csv.
    Run {
        #[command(flatten)]
        common: Common,
        /// Replace the optimizer seed from the config.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Tabulate utilities of given designs over a hyperparameter grid.
    Landscape {
        #[command(flatten)]
        common: Common,
        /// Comma-separated design bitstrings, e.g. 10,01,11.
        #[arg(long, value_delimiter = ',')]
        designs: Vec<String>,
        /// Grid points per hyperparameter axis.
        #[arg(long, default_value_t = 5)]
        grid_points: usize,
    },
    /// Evaluate random feasible designs against the recorded optimum.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Number of random designs to sample.
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Seed for the random design sample.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Recompute the experiment and check it against the recorded artifacts.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(&cli.log_level),
    )
    .init();
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }

    match cli.cmd {
        Cmd::Run {
            common,
            seed_override,
        } => {
            let mut cfg = roed_cli::load_config(&common.config)?;
            if let Some(seed) = seed_override {
                cfg.optimizer.seed = seed;
            }
            let out = roed_cli::resolve_out_dir(common.out);
            let results = roed_cli::run_experiment(&cfg, &out)?;
            println!(
                "design {} (worst-case utility {:.6}) after {} outer iterations [{:?}]",
                results.design,
                results.design_value,
                results.outer_iterations,
                results.termination
            );
            println!("artifacts in {}", out.display());
        }
        Cmd::Landscape {
            common,
            designs,
            grid_points,
        } => {
            let cfg = roed_cli::load_config(&common.config)?;
            let out = roed_cli::resolve_out_dir(common.out);
            let rows = roed_cli::evaluate_landscape(&cfg, &out, &designs, grid_points)?;
            println!(
                "{rows} rows -> {}",
                out.join(roed_cli::LANDSCAPE_FILE).display()
            );
        }
        Cmd::Compare {
            common,
            count,
            seed,
        } => {
            let cfg = roed_cli::load_config(&common.config)?;
            let out = roed_cli::resolve_out_dir(common.out);
            let outcome = roed_cli::compare_random_designs(&cfg, &out, count, seed)?;
            println!(
                "optimal design utility {:.6}; not exceeded by {}/{} random designs",
                outcome.optimal_value, outcome.n_not_exceeding, outcome.n_random
            );
        }
        Cmd::Verify { common } => {
            let cfg = roed_cli::load_config(&common.config)?;
            let out = roed_cli::resolve_out_dir(common.out);
            roed_cli::verify(&cfg, &out)?;
            println!("verified: artifacts in {} match the config", out.display());
        }
    }
    Ok(())
}
