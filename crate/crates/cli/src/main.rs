//! `microid`: synthetic data, training, grid search, evaluation and
//! Grad-CAM from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "microid", version, about = "Person identification from facial micro-expression clips")]
pub struct Cli {
    /// Worker threads for clip loading, rendering and grid cells.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// JSON file whose fields override the flag-derived run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base directory for relative manifest paths.
    #[arg(long, global = true, env = "MICROID_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic motion-signature dataset.
    Synth(SynthArgs),
    /// Split a manifest, train one model, write checkpoint and reports.
    Train(TrainArgs),
    /// Train every cell of a hyperparameter grid and rank them.
    Grid(GridArgs),
    /// Score a checkpoint or an ensemble on a manifest split.
    Eval(EvalArgs),
    /// Write Grad-CAM overlays for one clip.
    Gradcam(GradcamArgs),
    /// Train the single-apex-frame control classifier.
    Baseline(BaselineArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of motion paths.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Number of subjects: twice the paths (each path run both ways) or
    /// equal to them (one direction per path).
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub clips_per_subject: Option<usize>,
    /// Square frame side in pixels.
    #[arg(long)]
    pub frame_size: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub motion_span: Option<usize>,
    #[arg(long)]
    pub blob_sigma: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Manifest and split selection shared by the data-consuming commands.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fraction of each subject's clips used for training.
    #[arg(long, default_value_t = 0.5)]
    pub split_ratio: f64,
    /// Seed of the train/test split (defaults to `--seed`).
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Square resize target, overriding the database default.
    #[arg(long)]
    pub size: Option<usize>,
}

/// Architecture and solver flags. Unset flags fall back to the preset.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// smic, samm, casme2 or synth (default: from the manifest's dataset name).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub alpha: Option<usize>,
    /// Fast/slow channel ratio, e.g. `0.125` or `1/8`.
    #[arg(long, value_parser = config::parse_ratio)]
    pub beta: Option<f64>,
    /// adam or adamw.
    #[arg(long)]
    pub solver: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Residual blocks per stage, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<usize>>,
    #[arg(long)]
    pub stem_stride: Option<usize>,
    /// none, instance, rms or layer_rms.
    #[arg(long)]
    pub norm: Option<String>,
    /// raw, mean_removed or median_removed.
    #[arg(long)]
    pub fast_input: Option<String>,
    /// Temporal window length in frames.
    #[arg(long)]
    pub window: Option<usize>,
    /// 1 (grayscale) or 3 (RGB).
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON object of axes (`alpha`, `beta`, `solver`, `batch_size`);
    /// missing axes keep the template value. Default: the 16-cell grid.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Fraction of the training partition kept for fitting; the rest
    /// validates.
    #[arg(long, default_value_t = 0.5)]
    pub fit_ratio: f64,
    /// List the cells without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, conflicts_with_all = ["ensemble", "members"])]
    pub checkpoint: Option<PathBuf>,
    /// Ensemble spec JSON (`members`, `policy`).
    #[arg(long, conflicts_with = "members")]
    pub ensemble: Option<PathBuf>,
    /// Member checkpoints, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub members: Option<Vec<PathBuf>>,
    /// Indices of the members to keep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub subset: Option<Vec<usize>>,
    /// soft or hard; overrides the spec's policy.
    #[arg(long)]
    pub policy: Option<String>,
    /// Which partition to score: test, train or all.
    #[arg(long, default_value = "test")]
    pub partition: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub clip_id: String,
    /// Target class (default: the predicted class).
    #[arg(long = "class")]
    pub class: Option<usize>,
    /// fast or slow.
    #[arg(long, default_value = "fast")]
    pub pathway: String,
    /// Overlay opacity at saliency 1.
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also dump the upsampled map as a packed tensor.
    #[arg(long)]
    pub dump_raw: bool,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
