//! `ppfactor` binary: run configured experiments or built-in presets.
//!
//! Exit codes: 0 on success, 2 on configuration or input errors, 3 when a
//! run aborted numerically (partial artifacts are still written).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ppfactor::config::{self, MethodChoice, Preset, ThresholdChoice};
use ppfactor::runner::{self, RunFailure};

#[derive(Parser)]
#[command(
    name = "ppfactor",
    about = "Projection-pursuit density factorization runner",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a TOML config file.
    Run {
        /// Path to the config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in simulation preset.
    Simulate {
        /// Which preset to run.
        #[arg(long)]
        preset: Preset,
        /// Master seed (default 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default ppfactor-out/<preset>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Criterion variant(s) to run (default ours).
        #[arg(long)]
        method: Option<MethodChoice>,
        /// Stop-test threshold convention (default corrected).
        #[arg(long)]
        threshold_mode: Option<ThresholdChoice>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let cfg = match build_config(cli.cmd) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let threads = match runner::thread_cap_from_env() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };

    match runner::run_experiment(&cfg, threads) {
        Ok(outcome) => {
            println!("report: {}", outcome.artifacts.report_json.display());
            println!("table:  {}", outcome.artifacts.table_csv.display());
            println!("traces: {}", outcome.artifacts.trace_csv.display());
            println!("log:    {}", outcome.artifacts.log.display());
            match outcome.numerical_error {
                None => ExitCode::SUCCESS,
                Some(e) => {
                    eprintln!("run failed numerically: {e}");
                    ExitCode::from(3)
                }
            }
        }
        Err(RunFailure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(RunFailure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn build_config(cmd: Cmd) -> anyhow::Result<config::ExperimentConfig> {
    match cmd {
        Cmd::Run { config, seed, out } => {
            let mut cfg = config::parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            Ok(cfg)
        }
        Cmd::Simulate {
            preset,
            seed,
            out,
            method,
            threshold_mode,
        } => {
            let mut cfg = config::preset_config(preset);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(t) = threshold_mode {
                cfg.threshold_mode = t;
            }
            Ok(cfg)
        }
    }
}
