use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lofi_core::engine::Execution;
use lofi_harness::cost::{costreport, CostReportConfig};
use lofi_harness::sweep::{axis_values, sweep, Axis};
use lofi_harness::verify::{barrier_report, verify_equivalence};
use lofi_harness::{run, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "lofi", version, about = "Local fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; override the config's seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Recompute even if the artifact directory exists.
    #[arg(long)]
    force: bool,
    /// Process devices one at a time in index order.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            config.seeds = seeds.clone();
        }
        config.validate().context("--seeds")?;
        Ok(config)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            force: self.force,
            execution: if self.sequential {
                Execution::Sequential
            } else {
                Execution::Threaded
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Baseline and lo-fi runs with a comparison report.
    Run(Common),
    /// One run per value of a config axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; defaults to the config's sweep section.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Overhead and time-to-result grid from the cost model.
    Costreport {
        /// Profiles or report config (JSON); defaults to the shipped
        /// calibration profiles.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "artifacts")]
        out: PathBuf,
    },
    /// Checks that degenerate strategies give bitwise identical runs.
    VerifyEquivalence(Common),
    /// Loss barriers between lo-fi workers and between random inits.
    BarrierScan {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 21)]
        points: usize,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(common) => {
            let config = common.load()?;
            let art = run(&config, common.options())?;
            if art.reused {
                println!("up to date: {}", art.dir.display());
            } else {
                println!("wrote {}", art.dir.display());
            }
            for r in &art.summary {
                println!("{:<24} {:<8} mean {:.4} range [{:.4}, {:.4}]", r.model, r.split, r.mean, r.min, r.max);
            }
        }
        Command::Sweep { common, axis, values } => {
            let config = common.load()?;
            let values = match values {
                Some(v) => v,
                None => axis_values(&config, axis)?,
            };
            let art = sweep(&config, axis, &values, common.options())?;
            println!("wrote {}", art.dir.display());
            for r in art.comparison.iter().filter(|r| r.model == "lofi" || r.model == "baseline") {
                let flag = if r.observes_more_data { " (lo-fi observes more data)" } else { "" };
                println!("{}={:<8} {:<10} {:<8} mean {:.4}{flag}", r.axis, r.axis_value, r.model, r.split, r.mean);
            }
        }
        Command::Costreport { config, out } => {
            let config = match config {
                Some(path) => CostReportConfig::load(&path)?,
                None => CostReportConfig::calibration(),
            };
            let art = costreport(&config, &out)?;
            println!("wrote {}", art.dir.display());
        }
        Command::VerifyEquivalence(common) => {
            let config = common.load()?;
            let checks = verify_equivalence(&config, common.options().execution)?;
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::BarrierScan { common, points } => {
            let config = common.load()?;
            let report = barrier_report(&config, points, common.options().execution)?;
            for p in &report.shared_init {
                println!("{:<32} barrier {:.6}", p.pair, p.scan.barrier);
            }
            println!("{:<32} barrier {:.6}", report.random_init.pair, report.random_init.scan.barrier);
            println!("wrote {}", report.dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
