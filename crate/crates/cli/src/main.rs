//! `dpdlab`: datasets, training stages, sweeps, evaluation and reports from
//! a TOML experiment config.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Which;
use config::ExperimentConfig;
use dpdlab_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dpdlab", version, about = "Delta-GRU digital predistortion lab")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic OFDM dataset through the oracle PA.
    GenData,
    /// Fit the behavioral PA model.
    TrainPa,
    /// Train the DPD through the frozen PA model.
    TrainDpd,
    /// Quantization-aware fine-tuning of the trained DPD.
    Qat,
    /// Metrics and plot data with and without DPD.
    Evaluate {
        #[arg(long, value_enum, default_value = "dpd")]
        model: Which,
    },
    /// Sparsity and linearity over a grid of delta thresholds.
    SweepThresholds {
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.02,0.03,0.04")]
        theta_phi: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4")]
        theta_h: Vec<f64>,
        /// Fine-tune the DPD at each sparse grid point for this many epochs.
        #[arg(long, default_value_t = 0)]
        finetune_epochs: usize,
    },
    /// Linearity and energy over arithmetic precisions.
    SweepPrecision {
        #[arg(long, value_delimiter = ',', default_value = "32,16,12,8")]
        bits: Vec<u32>,
        /// Fine-tune each precision instead of post-training quantization.
        #[arg(long)]
        qat: bool,
    },
    /// Analytical energy and power report.
    EnergyReport {
        #[arg(long, value_enum, default_value = "dpd")]
        model: Which,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingPrerequisite(_) => 3,
        Error::Divergence(_) | Error::Overflow { .. } => 4,
        Error::Io { .. } => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .ok_or_else(|| Error::invalid("--config PATH is required"))?;
    let mut cfg = ExperimentConfig::load(&path)?.resolve(cli.seed, cli.deterministic);
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    cfg.validate()?;
    if cli.deterministic {
        // Sweeps and batch gradients outside a training pool run here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainPa => commands::train_pa(&cfg),
        Command::TrainDpd => commands::train_dpd(&cfg),
        Command::Qat => commands::qat(&cfg),
        Command::Evaluate { model } => commands::evaluate(&cfg, model),
        Command::SweepThresholds {
            theta_phi,
            theta_h,
            finetune_epochs,
        } => commands::sweep_thresholds(&cfg, &theta_phi, &theta_h, finetune_epochs, cli.deterministic),
        Command::SweepPrecision { bits, qat } => commands::sweep_precision(&cfg, &bits, qat),
        Command::EnergyReport { model } => commands::energy_report_cmd(&cfg, model),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
