mod commands;
mod config;
mod error;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bitstain", version, about = "Virtual H&E staining of phase-contrast volumes")]
struct Cli {
    /// Directory that receives one timestamped folder per run.
    #[arg(long, global = true, env = "BITSTAIN_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    /// Log filter, e.g. `info` or `debug`.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted `key=value` override applied after the file, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// BIT volume directory (raw grayscale or preprocessed), repeatable.
    #[arg(long, required = true)]
    pub bit: Vec<PathBuf>,
    /// H&E volume directory, repeatable.
    #[arg(long, required = true)]
    pub he: Vec<PathBuf>,
    /// Tile stride in pixels; defaults to the tile size.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a phantom: BIT, H&E and label volumes.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Background-subtract, rescale and stack a raw BIT volume.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
    },
    /// Masked-autoencoder pretraining of the shared generator backbone.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adversarial training with checkpoints after every epoch.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Pretrained backbone; skips the built-in pretraining stage.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Checkpoint to continue from, using its stored config.
        #[arg(long, conflicts_with = "backbone")]
        resume: Option<PathBuf>,
    },
    /// Stain a BIT volume slice by slice with a trained checkpoint.
    Stain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare a predicted volume with ground-truth labels.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Label volume, or an RGB H&E volume to segment first.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Feature CSV of the predicted images.
        #[arg(long, requires = "feats_real")]
        feats_pred: Option<PathBuf>,
        /// Feature CSV of the real images.
        #[arg(long, requires = "feats_pred")]
        feats_real: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp_secs()
        .init();
    match commands::run(&cli.output_root, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
