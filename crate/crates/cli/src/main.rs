//! `debias`: dataset synthesis, augmenter training, intermediate-domain
//! generation, evaluation, audits and embeddings.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use debias::data::BiasSpec;
use debias::eval::{AuditMode, EmbedMethod};

#[derive(Parser)]
#[command(name = "debias", version = env!("DEBIAS_VERSION"), about)]
/// Training-set debiasing by cycle-consistent translation into an
/// intermediate domain. Set DEBIAS_LOG=error|info|debug for progress logs.
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random choice of the command (overrides config seeds).
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel lanes for image loading and preprocessing.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled set of synthetic digits.
    Digits {
        #[arg(long)]
        out: PathBuf,
        /// Images per class (10 classes).
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split a labeled base set into a biased source domain X/ and target domain Y/.
    Synth {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Source bias, e.g. `none` or `hue=30,noise=4,bg=stripes,contrast=0.8,seed=1`.
        #[arg(long, default_value = "contrast=0.5")]
        source_bias: BiasSpec,
        /// Target bias, same syntax as --source-bias.
        #[arg(long, default_value = "hue=60,contrast=0.5,noise=4")]
        target_bias: BiasSpec,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the augmentation network on a source and a target domain.
    Train {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Config file of key=value lines, or a preset name (desk, paper-256).
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from <out>/checkpoint when it exists.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Translate a source domain into the intermediate domain with a trained checkpoint.
    Generate {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Batch-norm mode for generation (default: the checkpoint's generate_bn).
        #[arg(long, value_parser = ["train", "eval"])]
        bn: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare classifiers trained on source, intermediate and target data,
    /// all tested on the held-out half of the target domain.
    Eval {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        intermediate: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Measure label retention of an intermediate domain.
    Audit {
        #[arg(long)]
        source: PathBuf,
        /// Intermediate domain written by `generate` (with provenance.csv).
        #[arg(long)]
        intermediate: PathBuf,
        /// ground_truth (needs --base) or ssim_proxy.
        #[arg(long, default_value = "ground_truth")]
        mode: AuditMode,
        /// Unbiased labeled set the oracle classifier is trained on.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Mean-SSIM threshold below which a pair is suspect (default: eval.ssim_threshold).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Embed source, intermediate and target features in two dimensions.
    Embed {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        intermediate: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// pca or tsne.
        #[arg(long, default_value = "tsne")]
        method: EmbedMethod,
        /// Images per domain (default: eval.n_samples).
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the mean SSIM of two images to 6 decimals.
    Ssim {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Run the whole pipeline: synth, train, generate, eval, audit and embed.
    Experiment {
        /// Labeled base set; rendered digits when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value = "contrast=0.5")]
        source_bias: BiasSpec,
        #[arg(long, default_value = "hue=60,contrast=0.5,noise=4")]
        target_bias: BiasSpec,
        /// Preset name or config file; `configs/flagship.cfg` is the pinned desk flagship.
        #[arg(long, default_value = "desk")]
        config: String,
        /// Also train without the SSIM term and audit that run.
        #[arg(long)]
        ablation: bool,
        #[arg(long, default_value = "tsne")]
        method: EmbedMethod,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn init_logging() {
    let level = std::env::var("DEBIAS_LOG").unwrap_or_else(|_| "error".into());
    let level = match level.as_str() {
        "error" | "info" | "debug" => level,
        _ => "error".into(),
    };
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp_secs()
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                debias::Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
