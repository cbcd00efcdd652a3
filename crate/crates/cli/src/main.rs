use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use xbar_cli::config::EngineConfig;
use xbar_cli::oracle::{oracle_check, write_report, OracleCheckOptions};
use xbar_cli::run::{run_sweep, run_train, SweepSpec};
use xbar_cli::{convert, output_dir, ExperimentConfig};
use xbar_core::circuit::AamPaths;

/// Crossbar training simulator.
///
/// Output files go to the config's `output_dir` unless XBAR_OUT_DIR is set.
#[derive(Parser)]
#[command(name = "xbar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and write per-epoch metrics.
    Train {
        config: PathBuf,
        /// Write zeros in the timing columns so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
    },
    /// Train once per parameter value and summarise final accuracies.
    Sweep {
        config: PathBuf,
        /// Dotted config path, e.g. update.v. Several comma-separated paths
        /// all receive the same value.
        #[arg(long, value_delimiter = ',', required = true)]
        param: Vec<String>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Repetitions per value with consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        no_timing: bool,
    },
    /// Dump ideal, FCM and AAM conductances of a weight matrix (CSV, one row
    /// per input) and the elementwise AAM error relative to FCM.
    Convert {
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Compare FCM and AAM column currents with the exact nodal solve on
    /// random tiles. Exits with status 2 when FCM exceeds its tolerance.
    OracleCheck {
        config: PathBuf,
        #[arg(long)]
        trials: usize,
        /// Square tile sizes used in turn; defaults to the crossbar size.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { config, no_timing } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = output_dir(&cfg.output_dir);
            let o = run_train(&cfg, &out, !no_timing)?;
            let verdict = if o.diverged {
                "diverged"
            } else if o.converged {
                "converged"
            } else {
                "not converged"
            };
            println!("final accuracy {:.4} ({verdict}); metrics in {}", o.final_accuracy, out.display());
        }
        Command::Sweep { config, param, values, seeds, no_timing } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = output_dir(&cfg.output_dir);
            let points = run_sweep(&cfg, &SweepSpec { paths: param.clone(), values, seeds }, &out, !no_timing)?;
            println!("{:>12}  {:>9}  converged", param.join(","), "accuracy");
            for p in &points {
                println!("{:>12}  {:>9.4}  {}", p.value, p.mean_accuracy(), p.converged());
            }
            println!("summary in {}", out.join("sweep.csv").display());
        }
        Command::Convert { config, weights } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = output_dir(&cfg.output_dir);
            let dumps = convert::run_convert(&cfg, &weights, &out)?;
            for d in &dumps {
                println!(
                    "{} slice {}: AAM vs FCM max {:.3e} mean {:.3e}",
                    d.polarity,
                    d.slice,
                    d.max_error(),
                    d.mean_error()
                );
            }
            println!("grids in {}", out.display());
        }
        Command::OracleCheck { config, trials, sizes, tol } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = output_dir(&cfg.output_dir);
            let aam = match cfg.engine {
                EngineConfig::Aam { paths } => paths,
                _ => AamPaths::default(),
            };
            let opts = OracleCheckOptions { trials, sizes, tol, fcm: cfg.engine.fcm_options(), aam, seed: cfg.seed };
            let report = oracle_check(&cfg.crossbar, &opts)?;
            println!("trials {}", report.trials.len());
            println!("fcm  max rel error {:.3e}  mean {:.3e}  {:.1}x faster than oracle", report.fcm_max(), report.fcm_mean(), report.fcm_speedup());
            println!("aam  max rel error {:.3e}  mean {:.3e}  {:.1}x faster than oracle", report.aam_max(), report.aam_mean(), report.aam_speedup());
            if let Some(path) = write_report(&report, &out)? {
                eprintln!(
                    "fcm error {:.3e} exceeds tolerance {:.1e}; worst tile written to {}",
                    report.fcm_max(),
                    tol,
                    path.display()
                );
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
