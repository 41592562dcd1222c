//! `privjscc` — command-line driver for privacy-aware JSCC experiments.
//!
//! Exit codes: 0 success, 1 precondition / configuration error, 2 numeric
//! failure (including failed self-test checks), 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use privjscc::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use privjscc::experiment::{self, DataOutcome, Experiment, StageSelector};
use privjscc::selftest::{run_selftest, LossHooks};

#[derive(Debug, Parser)]
#[command(name = "privjscc", version, about = "Privacy-aware learned joint source-channel coding")]
#[command(after_help = format!(
    "The run directory is <output_dir>/<name>; set {OUTPUT_ROOT_ENV} to override output_dir."
))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configuration's global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the dataset cache.
    MakeData {
        #[command(flatten)]
        common: Common,
        /// Replace a cache that was built from different inputs.
        #[arg(long)]
        force: bool,
    },
    /// Train the DIB stages and/or the adversarial baselines.
    Train {
        #[command(flatten)]
        common: Common,
        /// all, stage1, stage2, finetune or baseline.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Attack sweeps, reconstruction metrics, probes, plots.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated model ids (default: dib plus every baseline).
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
    },
    /// Run the fast invariant suite.
    Selftest,
}

fn experiment(common: &Common) -> privjscc::Result<Experiment> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    Experiment::new(config)
}

fn run(cli: Cli) -> privjscc::Result<ExitCode> {
    match cli.command {
        Command::MakeData { common, force } => {
            let exp = experiment(&common)?;
            let outcome = experiment::make_data(&exp, force)?;
            let what = match outcome {
                DataOutcome::Created => "created",
                DataOutcome::Unchanged => "unchanged",
                DataOutcome::Replaced => "replaced",
            };
            println!("dataset cache {what}: {}", exp.paths.data.display());
        }
        Command::Train { common, stage } => {
            let exp = experiment(&common)?;
            let outcome = experiment::train(&exp, StageSelector::parse(&stage)?)?;
            for path in outcome.checkpoints {
                println!("checkpoint {}", path.display());
            }
        }
        Command::Evaluate { common, models } => {
            let exp = experiment(&common)?;
            let ids = (!models.is_empty()).then_some(models.as_slice());
            let summary = experiment::evaluate(&exp, ids)?;
            for model in &summary.models {
                let accuracies: Vec<String> = model
                    .record
                    .attacks
                    .iter()
                    .map(|a| format!("{}dB:{:.3}", a.snr_ae_db, a.eavesdrop_accuracy))
                    .collect();
                println!(
                    "{:<12} mse {:.5}  psnr {:.2} dB  eavesdropping {}",
                    model.record.model_id,
                    model.record.mse,
                    model.record.psnr,
                    accuracies.join(" ")
                );
            }
            println!("metrics {}", summary.metrics_csv.display());
            println!("plot {}", summary.plot.display());
        }
        Command::Selftest => {
            let report = run_selftest(&LossHooks::default());
            println!("{report}");
            if !report.passed() {
                for check in report.failures() {
                    eprintln!("failed: {}", check.name);
                }
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
