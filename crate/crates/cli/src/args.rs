use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use svpgen::classify::Architecture;
use svpgen::imageio::Label;
use svpgen::optim::OptimizerKind;

/// Diffusion-based minority-class augmentation and imbalance-robust
/// evaluation for sub-visible particle images.
#[derive(Parser, Clone, Debug, Serialize, Deserialize)]
#[command(name = "svpgen", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct GlobalArgs {
    /// TOML experiment configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root that manifest paths resolve against.
    #[arg(long, env = "SVP_DATA_ROOT", global = true)]
    pub data_root: Option<PathBuf>,
    /// Parent directory of content-addressed run directories.
    #[arg(long, global = true)]
    pub runs_dir: Option<PathBuf>,
    /// Explicit run directory instead of `<runs-dir>/<command>-<hash>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Continue an existing run directory.
    #[arg(long, global = true, conflicts_with = "overwrite")]
    pub resume: bool,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Render a procedural three-class corpus and its manifest.
    MakeProcedural(MakeProceduralArgs),
    /// Sample training-set manifests from real and generated pools.
    BuildDataset(BuildDatasetArgs),
    /// Train a single-class diffusion model.
    TrainDiffusion(TrainDiffusionArgs),
    /// Generate images (and a denoising trajectory) from a checkpoint.
    Sample(SampleArgs),
    /// Fréchet distance between two image sets.
    Fid(FidArgs),
    /// Train one classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Hyper-parameter grid search.
    Grid(GridArgs),
    /// Evaluate a classifier checkpoint on a manifest.
    Eval(EvalArgs),
    /// Copy the most confident mistakes out of a scores file.
    ExportMisclassified(ExportArgs),
    /// Desk-scale end-to-end experiment on a procedural corpus.
    Demo(DemoArgs),
    /// Replay a run from its run.json.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeProcedural(_) => "make-procedural",
            Command::BuildDataset(_) => "build-dataset",
            Command::TrainDiffusion(_) => "train-diffusion",
            Command::Sample(_) => "sample",
            Command::Fid(_) => "fid",
            Command::TrainClassifier(_) => "train-classifier",
            Command::Grid(_) => "grid",
            Command::Eval(_) => "eval",
            Command::ExportMisclassified(_) => "export-misclassified",
            Command::Demo(_) => "demo",
            Command::Rerun(_) => "rerun",
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct MakeProceduralArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    /// Per-class overrides, e.g. `silicone_oil=5,air_bubble=5,protein=100`.
    #[arg(long, value_delimiter = ',', value_parser = parse_count)]
    pub counts: Vec<(Label, usize)>,
}

fn parse_count(s: &str) -> Result<(Label, usize), String> {
    let (l, n) = s.split_once('=').ok_or_else(|| format!("expected label=count, got {s:?}"))?;
    let label = l.trim().parse::<Label>().map_err(|e| e.to_string())?;
    let n = n.trim().parse::<usize>().map_err(|e| format!("{n:?}: {e}"))?;
    Ok((label, n))
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct BuildDatasetArgs {
    /// Presets to build (Real-0..4, Mixed-1..4).
    #[arg(long, value_delimiter = ',', required = true)]
    pub preset: Vec<String>,
    /// Manifest(s) of real images.
    #[arg(long, value_delimiter = ',', required = true)]
    pub real_pool: Vec<PathBuf>,
    /// Manifest(s) of generated images.
    #[arg(long, value_delimiter = ',')]
    pub generated_pool: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Divide every preset count by this factor (desk scale).
    #[arg(long, default_value_t = 1)]
    pub scale_divisor: usize,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct ScheduleFlags {
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainDiffusionArgs {
    /// Single-class manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Denoiser preset (default, small, tiny).
    #[arg(long)]
    pub denoiser: Option<String>,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, conflicts_with = "no_ema")]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub no_ema: bool,
    #[arg(long, value_delimiter = ',')]
    pub snapshot_epochs: Option<Vec<usize>>,
    /// Samples per FID evaluation at snapshot epochs (0 disables).
    #[arg(long)]
    pub fid_samples: Option<usize>,
    #[arg(long)]
    pub sample_batch: Option<usize>,
    /// Reverse-process variance: posterior or beta.
    #[arg(long)]
    pub variance: Option<String>,
    /// Loss reduction: mean or sum.
    #[arg(long)]
    pub reduction: Option<String>,
    /// FID feature extractor (pixel_stats, small_cnn).
    #[arg(long)]
    pub extractor: Option<String>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Snapshots per trajectory row (0 disables).
    #[arg(long, default_value_t = 6)]
    pub trajectory: usize,
    #[arg(long, default_value_t = 25)]
    pub batch: usize,
    /// Use the raw weights instead of the moving average.
    #[arg(long)]
    pub no_ema: bool,
    /// Reverse-process variance: posterior or beta.
    #[arg(long, default_value = "posterior")]
    pub variance: String,
    /// Also write a generated-provenance manifest with this label.
    #[arg(long)]
    pub label: Option<Label>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct FidArgs {
    /// Real images: a manifest (.csv) or a directory.
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Directory of generated images.
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// pixel_stats, small_cnn or imported.
    #[arg(long)]
    pub extractor: Option<String>,
    /// Imported features of the generated set.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Imported features of the real set.
    #[arg(long)]
    pub real_features: Option<PathBuf>,
    /// Use the first n generated images (by file name).
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct ClassifierFlags {
    #[arg(long)]
    pub architecture: Option<Architecture>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[command(flatten)]
    pub classifier: ClassifierFlags,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GridArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// `paper` (126 points) or `smoke` (the base configuration only).
    #[arg(long, default_value = "paper")]
    pub grid: String,
    /// Write the enumerated grid without training.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub classifier: ClassifierFlags,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct DemoArgs {
    /// Real training images per minority class.
    #[arg(long, default_value_t = 5)]
    pub minority: usize,
    /// Real protein training images (majority class).
    #[arg(long, default_value_t = 100)]
    pub majority: usize,
    /// Validation images per class.
    #[arg(long, default_value_t = 20)]
    pub val_per_class: usize,
    /// Optimization steps per minority-class diffusion model.
    #[arg(long, default_value_t = 300)]
    pub diffusion_steps: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub diffusion_lr: f64,
    /// Diffusion timesteps.
    #[arg(long, default_value_t = 1000)]
    pub timesteps: usize,
    /// Classifier epochs per split.
    #[arg(long, default_value_t = 15)]
    pub classifier_epochs: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct RerunArgs {
    /// run.json of the run to replay.
    pub record: PathBuf,
    /// Where to write the replay: the run directory, or `--out` for
    /// commands that have one. Defaults to the recorded location.
    #[arg(long)]
    pub into: Option<PathBuf>,
}
