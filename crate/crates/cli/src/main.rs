//! `nledn`: synthesize rainy data, train, de-rain, evaluate, inspect models
//! and run gradient checks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nledn_core::gradcheck::Scale;
use nledn_core::model::Variant;

#[derive(Parser, Debug)]
#[command(name = "nledn", version, about = "Single-image rain streak removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Overlay synthetic rain on clean PNGs, writing rainy/, clean/ and manifest.tsv.
    Synth(SynthArgs),
    /// Write procedural clean scenes as PNGs.
    Scenes(ScenesArgs),
    /// Train a model on a rainy/clean dataset.
    Train(TrainArgs),
    /// De-rain PNG images with a trained checkpoint.
    Infer(InferArgs),
    /// PSNR/SSIM on the luminance channel against ground truth.
    Eval(EvalArgs),
    /// Print a model configuration and its parameter count.
    Describe(DescribeArgs),
    /// Finite-difference check of every differentiable kernel and the network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    clean_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of pairs; clean images are reused cyclically.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 120)]
    streaks: usize,
    #[arg(long, default_value_t = 60.0)]
    angle_min: f64,
    #[arg(long, default_value_t = 120.0)]
    angle_max: f64,
    #[arg(long, default_value_t = 8.0)]
    length_min: f64,
    #[arg(long, default_value_t = 30.0)]
    length_max: f64,
    /// Cross-profile σ in pixels.
    #[arg(long, default_value_t = 0.4)]
    width_min: f64,
    #[arg(long, default_value_t = 1.2)]
    width_max: f64,
    #[arg(long, default_value_t = 0.15)]
    intensity_min: f64,
    #[arg(long, default_value_t = 0.45)]
    intensity_max: f64,
}

#[derive(Args, Debug)]
struct ScenesArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Model shape flags shared by `train` and `describe`; each overrides the config file.
#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// Ablation configuration applied on top of the base widths.
    #[arg(long)]
    variant: Option<Variant>,
    /// Small widths (C=4, g=2, L=2) for quick experiments.
    #[arg(long)]
    micro: bool,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    growth_rate: Option<usize>,
    #[arg(long)]
    dense_layers: Option<usize>,
    /// `softmax` or `raw-sum`.
    #[arg(long)]
    affinity: Option<nledn_core::tensor::AffinityMode>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` file with training and model settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the rain map as (R + 1) / 2 under <out>/rainmap/.
    #[arg(long)]
    dump_rainmap: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    gt_dir: PathBuf,
    /// Directory of restored PNGs named like the ground truth.
    #[arg(long, conflicts_with_all = ["ckpt", "rainy_dir"])]
    pred_dir: Option<PathBuf>,
    #[arg(long, requires = "rainy_dir")]
    ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    rainy_dir: Option<PathBuf>,
    /// Write the TSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    /// Describe a saved model instead of a configuration.
    #[arg(long, conflicts_with = "config")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "micro")]
    scale: Scale,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale one named check's analytic gradient by 1.01.
    #[arg(long, hide = true)]
    perturb: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
