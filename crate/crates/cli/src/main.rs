//! Command-line workbench: dataset synthesis, two-phase training,
//! restoration, evaluation, and the efficiency benchmark.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lnca_core::bench::ModelKind;
use lnca_core::Error;

#[derive(Parser)]
#[command(
    name = "lnca",
    version,
    about = "Latent neural cellular automata for image restoration",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corrupted/clean dataset with a JSON-lines manifest.
    MakeDataset {
        #[command(flatten)]
        common: CommonOpts,
        /// Folder of source images (PNG/PPM/JPEG); resized to the configured shape.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Generate this many procedural images instead of reading a folder.
        #[arg(long)]
        synthetic: Option<usize>,
    },
    /// Phase 1: train the autoencoder on triplet batches.
    TrainAe {
        #[command(flatten)]
        common: CommonOpts,
        /// Dataset directory produced by make-dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Phase 2: train the CA in latent space against a frozen autoencoder.
    TrainNca {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        /// Autoencoder checkpoint from train-ae (defaults to OUT/ae.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Restore a folder of images with a trained checkpoint.
    Restore {
        #[command(flatten)]
        common: CommonOpts,
        /// Full checkpoint (ae + nca sections) from train-nca.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Folder of corrupted images.
        #[arg(long)]
        images: PathBuf,
        /// CA iterations (eval protocol default).
        #[arg(long, default_value_t = lnca_core::nca::EVAL_STEPS)]
        steps: usize,
    },
    /// Evaluate restoration quality (SSIM/PSNR/MSE report CSV).
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with manifest, clean/ and corrupted/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = lnca_core::nca::EVAL_STEPS)]
        steps: usize,
    },
    /// Efficiency benchmark over the resolution x batch grid.
    Bench {
        #[command(flatten)]
        common: CommonOpts,
        /// Models to benchmark (repeatable); defaults to all three.
        #[arg(long = "model", value_parser = parse_model)]
        models: Vec<ModelKind>,
        /// Measured repeats after the warm-up run.
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// CA iterations for the training-step benchmark.
        #[arg(long, default_value_t = 16)]
        steps: usize,
        /// Live tensor byte cap; configurations above it report "--".
        #[arg(long, default_value_t = lnca_core::bench::DEFAULT_BYTE_BUDGET)]
        byte_budget: usize,
        /// Skip the training-step grid.
        #[arg(long)]
        inference_only: bool,
        /// Skip the inference grid.
        #[arg(long)]
        training_only: bool,
        /// Grid resolutions (defaults to the full protocol grid).
        #[arg(long, value_delimiter = ',', default_values_t = lnca_core::bench::GRID_RESOLUTIONS)]
        resolutions: Vec<usize>,
        /// Grid batch sizes (defaults to the full protocol grid).
        #[arg(long, value_delimiter = ',', default_values_t = lnca_core::bench::GRID_BATCHES)]
        batches: Vec<usize>,
    },
    /// Print the published JSON schema for the run configuration.
    PrintConfigSchema,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeDataset { common, images, synthetic } => {
            commands::make_dataset(common, images, synthetic)
        }
        Command::TrainAe { common, data, epochs, batch } => {
            commands::train_ae(common, data, epochs, batch)
        }
        Command::TrainNca { common, data, checkpoint, epochs, batch } => {
            commands::train_nca(common, data, checkpoint, epochs, batch)
        }
        Command::Restore { common, checkpoint, images, steps } => {
            commands::restore(common, checkpoint, images, steps)
        }
        Command::Eval { common, checkpoint, data, steps } => {
            commands::eval(common, checkpoint, data, steps)
        }
        Command::Bench {
            common,
            models,
            repeats,
            steps,
            byte_budget,
            inference_only,
            training_only,
            resolutions,
            batches,
        } => commands::bench(
            common,
            models,
            repeats,
            steps,
            byte_budget,
            inference_only,
            training_only,
            resolutions,
            batches,
        ),
        Command::PrintConfigSchema => {
            println!("{}", lnca_core::config::CONFIG_SCHEMA);
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Single-line machine-parsable error report.
fn report_error(e: &Error) {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("lnca: error code={} kind={} msg={:?}", e.exit_code(), e.kind(), msg);
}
