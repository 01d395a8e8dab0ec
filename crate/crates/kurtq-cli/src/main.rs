//! `kurtq`: symmetric INT8 quantization-aware training with a selective
//! kurtosis regularizer, at desk scale.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kurtq_cli::commands::{self, AbArgs, InspectArgs, QuantizeArgs, TrainArgs};

#[derive(Parser)]
#[command(
    name = "kurtq",
    about = "INT8 quantization-aware training with a selective kurtosis regularizer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training pipeline from a JSON config.
    Train {
        /// Path to the JSON experiment config.
        config: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated stage subset, in pipeline order
        /// (finetune,qat_finetune,quantize,evaluate). Default: all.
        #[arg(long)]
        stages: Option<String>,
        /// Seed override (falls back to KURTQ_SEED, then the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Run-record JSON path (default: checkpoint path with .run.json).
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Quantize an FP32 checkpoint to INT8 with per-tensor max-abs scales.
    Quantize {
        /// Input FP32 checkpoint.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output INT8 checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-tensor kurtosis report and weight histograms of a checkpoint.
    Inspect {
        /// Input checkpoint (FP32 or INT8).
        #[arg(long = "in")]
        input: PathBuf,
        /// Exclusion threshold for the included flag.
        #[arg(long, default_value_t = 100.0)]
        threshold: f32,
        /// Write the report CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write a 64-bin histogram CSV: --hist TENSOR PATH.
        #[arg(long, num_args = 2, value_names = ["TENSOR", "PATH"])]
        hist: Option<Vec<String>>,
    },
    /// A/B comparison: QAT with selective kurtosis vs QAT alone.
    Ab {
        /// Path to the JSON experiment config.
        config: PathBuf,
        /// Output JSON path (default ab.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override (falls back to KURTQ_SEED, then the config).
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    // clap's default usage-error exit code is 2; this tool reserves 2 for
    // numeric failures, so map parse errors to 1 explicitly.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };

    let result = match cli.command {
        Command::Train {
            config,
            out,
            stages,
            seed,
            record,
        } => commands::cmd_train(&TrainArgs {
            config,
            out,
            stages,
            seed,
            record,
        }),
        Command::Quantize { input, out } => commands::cmd_quantize(&QuantizeArgs { input, out }),
        Command::Inspect {
            input,
            threshold,
            csv,
            hist,
        } => {
            let hist = hist.map(|mut pair| {
                let path = PathBuf::from(pair.pop().expect("clap enforces two values"));
                let tensor = pair.pop().expect("clap enforces two values");
                (tensor, path)
            });
            commands::cmd_inspect(&InspectArgs {
                input,
                threshold,
                csv,
                hist,
            })
        }
        Command::Ab { config, out, seed } => commands::cmd_ab(&AbArgs { config, out, seed }),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
