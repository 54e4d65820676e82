//! `segxplain` — train a GAN-based polyp/instrument segmentation model,
//! predict masks, explain predictions as relevance heatmaps, and score
//! results.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use segxplain_core::Error;

#[derive(Parser)]
#[command(name = "segxplain", version, about)]
struct Cli {
    /// Flat `key = value` config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice (data, init, shuffling).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Network size profile: `canonical-256` or `desk-32`.
    #[arg(long, global = true)]
    profile: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset with train/test manifests.
    GenData {
        /// `polyp` (low-contrast blobs) or `instrument` (high-contrast rod).
        #[arg(long)]
        kind: String,
        /// Number of image/mask pairs (split 80/20 into train/test).
        #[arg(long)]
        count: usize,
        /// Square image size in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },

    /// Train generator and discriminator on a dataset manifest.
    Train {
        /// Training manifest (`id<TAB>image<TAB>mask` lines).
        #[arg(long)]
        manifest: PathBuf,
        /// Run directory for `gen.ckpt`, `disc.ckpt`, `loss.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f32>,
        #[arg(long)]
        adam_beta1: Option<f32>,
        #[arg(long)]
        adam_beta2: Option<f32>,
        #[arg(long)]
        adam_epsilon: Option<f32>,
        /// Weight of the L1 reconstruction term (0 = adversarial only).
        #[arg(long)]
        l1_weight: Option<f32>,
        #[arg(long)]
        checkpoint_interval: Option<usize>,
    },

    /// Predict binary masks for an image or a whole manifest.
    Infer {
        /// Generator checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Single input image (mutually exclusive with --manifest).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Manifest of inputs (mutually exclusive with --image).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory for `<id>_mask.png` files.
        #[arg(long)]
        out: PathBuf,
        /// Binarization threshold on the tanh output.
        #[arg(long)]
        threshold: Option<f32>,
    },

    /// Explain a prediction as relevance heatmaps.
    Explain {
        /// Generator checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image to explain.
        #[arg(long)]
        image: PathBuf,
        /// Output directory for heatmaps.
        #[arg(long)]
        out: PathBuf,
        /// `mask:<threshold>`, `pixel:<c>,<y>,<x>`, or `full`.
        #[arg(long)]
        target: Option<String>,
        /// Denominator stabilizer.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Leave layer biases out of the propagation denominators.
        #[arg(long)]
        exclude_bias: bool,
        /// Also write one heatmap per generator layer.
        #[arg(long)]
        all_layers: bool,
        /// Also write raw relevance tensors as `<id>_lrp_maps.bin`.
        #[arg(long)]
        raw: bool,
    },

    /// Score predictions against ground-truth masks.
    Eval {
        /// Generator checkpoint (mutually exclusive with --pred-dir).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of precomputed `<id>_mask.png` predictions.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        /// Manifest with ground-truth masks.
        #[arg(long)]
        manifest: PathBuf,
        /// Binarization threshold on the tanh output.
        #[arg(long)]
        threshold: Option<f32>,
        /// Directory for `report.txt` (defaults to the current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        // bad user input or configuration
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownProfile(_) => 2,
        // anything that went wrong while doing the work
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { ref kind, count, size, ref out } => {
            commands::gen_data(&cli, kind, count, size, out)
        }
        Command::Train {
            ref manifest,
            ref out,
            epochs,
            batch_size,
            learning_rate,
            adam_beta1,
            adam_beta2,
            adam_epsilon,
            l1_weight,
            checkpoint_interval,
        } => commands::train(
            &cli,
            manifest,
            out,
            commands::TrainFlags {
                epochs,
                batch_size,
                learning_rate,
                adam_beta1,
                adam_beta2,
                adam_epsilon,
                l1_weight,
                checkpoint_interval,
            },
        ),
        Command::Infer {
            ref checkpoint,
            ref image,
            ref manifest,
            ref out,
            threshold,
        } => commands::infer(&cli, checkpoint, image.as_deref(), manifest.as_deref(), out, threshold),
        Command::Explain {
            ref checkpoint,
            ref image,
            ref out,
            ref target,
            epsilon,
            exclude_bias,
            all_layers,
            raw,
        } => commands::explain(
            &cli,
            checkpoint,
            image,
            out,
            target.as_deref(),
            epsilon,
            exclude_bias,
            all_layers,
            raw,
        ),
        Command::Eval {
            ref checkpoint,
            ref pred_dir,
            ref manifest,
            threshold,
            ref out,
        } => commands::eval(
            &cli,
            checkpoint.as_deref(),
            pred_dir.as_deref(),
            manifest,
            threshold,
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
