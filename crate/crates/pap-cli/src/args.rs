//! Command-line surface.
//!
//! Flags left unset fall back to entries in an optional `KEY=VALUE` config
//! file, then to built-in defaults; every run records the fully resolved
//! configuration in `run.json` under the output directory.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "pap", version, about = "Adversarial patches for crowd counting, desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a counting model on a dataset.
    Train(TrainArgs),
    /// Generate an adversarial patch against a trained source model.
    GenPatch(GenPatchArgs),
    /// Evaluate patches against models: transfer matrix plus clean row.
    AttackEval(AttackEvalArgs),
    /// Adversarially train a model with generated patches.
    Advtrain(AdvtrainArgs),
    /// Report helpers: lambda sweeps, loss ablations, overestimation curves.
    Report(ReportArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Output directory; all artifacts, plus run.json, land here.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed; falls back to the PAP_SEED environment variable, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional KEY=VALUE config file supplying defaults for unset flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads for scene-parallel stages (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// standard | scale-shift | clutter
    #[arg(long, default_value = "standard")]
    pub preset: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// multi | single
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenPatchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trained source model stem (path to model.papw/model.json, extension
    /// optional).
    #[arg(long)]
    pub source: PathBuf,
    /// Dataset directory; the training split drives the optimization.
    #[arg(long)]
    pub data: PathBuf,
    /// increase | decrease
    #[arg(long)]
    pub direction: Option<String>,
    /// Position-loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Step size on the raw gradient.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Inner iterations per scene visit.
    #[arg(long = "T")]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Patch side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// square | circle | trapezoid
    #[arg(long)]
    pub shape: Option<String>,
    /// Drop the density-weight matrix (plain count loss ablation).
    #[arg(long)]
    pub no_density_weights: bool,
    /// patch_region | whole_map
    #[arg(long)]
    pub position_scope: Option<String>,
    /// Randomize patch orientation by quarter turns.
    #[arg(long)]
    pub rotate: bool,
    /// Limit optimization to the first N training scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Baseline method instead of the perceptual generator:
    /// migm | nigm | ti-nigm | avg-dens (avg-dens accepts several --source
    /// stems separated by commas).
    #[arg(long)]
    pub baseline: Option<String>,
}

#[derive(Debug, Args)]
pub struct AttackEvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated patch files (.papp, extension optional).
    #[arg(long)]
    pub patches: String,
    /// Comma-separated model stems.
    #[arg(long)]
    pub models: String,
    #[arg(long)]
    pub data: PathBuf,
    /// train | test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Dump side-by-side clean/adv/density PPMs for the first N scenes.
    #[arg(long, default_value_t = 0)]
    pub dump_vis: usize,
}

#[derive(Debug, Args)]
pub struct AdvtrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// oat | iat
    #[arg(long)]
    pub variant: String,
    /// Pretrained model stem to harden.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Total training epochs E (>= 4).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Inner-attack iterations (defaults: 25 for OAT's up-front patches, 5
    /// for IAT's per-epoch regeneration).
    #[arg(long = "T")]
    pub inner_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated lambda grid; generates one patch per value against
    /// --source and evaluates on --models.
    #[arg(long)]
    pub sweep_lambda: Option<String>,
    /// Emit the loss-term ablation table (none, scale loss without weights,
    /// scale loss, position loss, full).
    #[arg(long)]
    pub loss_ablation: bool,
    /// Emit overestimation curves from an attack-eval matrix.json.
    #[arg(long)]
    pub overestimation: Option<PathBuf>,
    /// increase | decrease (sign convention of the curves).
    #[arg(long)]
    pub direction: Option<String>,
    /// Source model stem for sweep/ablation runs.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Comma-separated target model stems for sweep/ablation runs.
    #[arg(long)]
    pub models: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Scene budget per generated patch (keeps sweeps affordable).
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Inner iterations per scene visit for sweep/ablation patches.
    #[arg(long = "T")]
    pub inner_steps: Option<usize>,
    /// Patch optimization epochs for sweep/ablation patches.
    #[arg(long)]
    pub epochs: Option<usize>,
}
