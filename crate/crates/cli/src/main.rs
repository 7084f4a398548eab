//! Command-line front end. Every subcommand loads a JSON experiment config,
//! applies any flag overrides, and drives one pipeline from the core crate.
//!
//! Exit codes: 0 on success, 2 for configuration and usage problems, 3 when
//! training diverges, 4 when a verification check fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grpolab_core::experiment::{self, AblateSummary};
use grpolab_core::{Error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "grpolab", version, about = "Group-relative policy optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rollout worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics.csv plus a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evolve and refine a treatment plan for one patient.
    Search {
        #[command(flatten)]
        common: Common,
        /// Checkpoint from a previous train run.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Patient index within the checkpoint's cohort.
        #[arg(long)]
        patient: usize,
    },
    /// Run a named ablation: ppo_reduction or fairness_sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        mode: String,
    },
    /// Audit analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn load(common: &Common) -> grpolab_core::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.to_string_lossy().into_owned();
    }
    Ok(config)
}

fn run(cli: Cli) -> grpolab_core::Result<()> {
    match cli.command {
        Command::Train { common } => {
            let config = load(&common)?;
            let artifacts = experiment::run_train(&config, common.workers)?;
            match artifacts.final_mean_return {
                Some(ret) => println!(
                    "trained {} iterations, final mean return {ret:.6}",
                    artifacts.iterations
                ),
                None => println!("no training iterations requested; wrote an untrained checkpoint"),
            }
            println!("metrics: {}", artifacts.metrics_path.display());
            println!("checkpoint: {}", artifacts.checkpoint_path.display());
            Ok(())
        }
        Command::Search { common, checkpoint, patient } => {
            let config = load(&common)?;
            let report = experiment::run_search(&config, &checkpoint, patient)?;
            println!("patient {patient}: refined {} candidates", report.candidates.len());
            println!(
                "selected plan {:?}, estimated return {:.6}",
                report.selected_actions, report.selected_estimate
            );
            Ok(())
        }
        Command::Ablate { common, mode } => {
            let config = load(&common)?;
            match experiment::run_ablate(&config, &mode, common.workers)? {
                AblateSummary::PpoReduction { max_discrepancy, csv_path } => {
                    println!("ppo_reduction: max |grpo - ppo| = {max_discrepancy:.3e} over 100 batches");
                    println!("table: {}", csv_path.display());
                }
                AblateSummary::FairnessSweep { rows, csv_path } => {
                    for row in &rows {
                        println!("alpha3 = {}: mean fairness gap {:.6}", row.alpha3, row.mean_gap);
                    }
                    println!("table: {}", csv_path.display());
                }
            }
            Ok(())
        }
        Command::Gradcheck { common, corrupt } => {
            let config = load(&common)?;
            let checks = experiment::run_gradcheck(&config, corrupt.as_deref())?;
            let mut failed = Vec::new();
            for check in &checks {
                println!(
                    "{:<18} max relative error {:.3e}  {}",
                    check.module,
                    check.max_rel_error,
                    if check.pass { "PASS" } else { "FAIL" }
                );
                if !check.pass {
                    failed.push(check.module);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::CheckFailed(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } => 3,
        Error::CheckFailed(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
