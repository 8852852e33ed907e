use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(
    name = "climprobe",
    version,
    about = "Train a spatio-temporal SST emulator and probe it with pixel-wise attribution",
    args_conflicts_with_subcommands = true
)]
pub struct Cli {
    /// Replay a run from a manifest (or a hand-written file of the same schema).
    #[arg(long, value_name = "MANIFEST")]
    pub config: Option<PathBuf>,
    /// With --config: write outputs here instead of the recorded location.
    #[arg(short = 'o', long, requires = "config")]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Serialize, Deserialize, Clone, Debug)]
#[serde(tag = "command", content = "args", rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic monthly field series.
    Synth(SynthArgs),
    /// Smooth a raw series and fix the train/validation windows per lead.
    Prepare(PrepareArgs),
    /// Train one lead-time model on a prepared dataset.
    Train(TrainArgs),
    /// Masked MSE of a checkpoint on a split, with optional sample panels.
    Eval(EvalArgs),
    /// Attribution heatmaps for one output pixel of one or more samples.
    Explain(ExplainArgs),
    /// Dataset-level mean heatmaps and contribution series.
    Aggregate(AggregateArgs),
    /// Occlude a rectangle of the input window and map the output change.
    Ablate(AblateArgs),
    /// Serve the probing API and the UI bundle.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Prepare(_) => "prepare",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Explain(_) => "explain",
            Command::Aggregate(_) => "aggregate",
            Command::Ablate(_) => "ablate",
            Command::Serve(_) => "serve",
        }
    }

    /// Redirect outputs; `false` for commands that write none.
    pub fn set_output(&mut self, out: PathBuf) -> bool {
        match self {
            Command::Synth(a) => a.output = out,
            Command::Prepare(a) => a.output = out,
            Command::Train(a) => a.output = out,
            Command::Eval(a) => a.output = out,
            Command::Explain(a) => a.output = out,
            Command::Aggregate(a) => a.output = out,
            Command::Ablate(a) => a.output = out,
            Command::Serve(_) => return false,
        }
        true
    }
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct SynthArgs {
    /// Starting configuration: `default` or `desk` (the benchmark generator).
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// Grid as HxW, e.g. 24x40.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub months: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub persistence: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub noise_radius: Option<f64>,
    #[arg(long)]
    pub spinup: Option<usize>,
    /// Land rectangle row0,col0,row1,col1 (repeatable).
    #[arg(long)]
    #[serde(default)]
    pub land: Vec<String>,
    /// Teleconnection `r0,c0,r1,c1:r0,c0,r1,c1:coupling:lag` (repeatable).
    #[arg(long)]
    #[serde(default)]
    pub link: Vec<String>,
    #[arg(short = 'o', long)]
    pub output: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct PrepareArgs {
    /// Raw series written by `synth`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,6,9")]
    pub leads: Vec<usize>,
    /// Input window length.
    #[arg(long, default_value_t = 12)]
    pub months: usize,
    #[arg(long, default_value_t = 1024)]
    pub train_n: usize,
    #[arg(long, default_value_t = 96)]
    pub val_n: usize,
    /// `contiguous` (guard gap between splits) or `interleaved`.
    #[arg(long, default_value = "contiguous")]
    pub policy: String,
    /// Output directory for smooth.fsr and index.json.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct TrainArgs {
    /// index.json written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lead: usize,
    /// `desk`, `canonical`, or a JSON architecture file.
    #[arg(long, default_value = "desk")]
    pub arch: String,
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    /// L2 coefficient.
    #[arg(long, default_value_t = 1e-2)]
    pub weight_decay: f64,
    /// Shuffling seed.
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Weight initialization seed.
    #[arg(long, default_value_t = 11)]
    pub model_seed: u64,
    /// Train on land cells too.
    #[arg(long)]
    #[serde(default)]
    pub no_mask_loss: bool,
    /// Skip input standardization.
    #[arg(long)]
    #[serde(default)]
    pub no_standardize: bool,
    /// Checkpoint path.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset index; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `train`, `val` or `all`.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Also render panels for this sample.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(short = 'o', long)]
    pub output: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sample ids: `12`, `0,4,9` or `0-15`; more than one runs in parallel.
    #[arg(long, alias = "batch")]
    pub sample: String,
    /// Target pixel as row,col.
    #[arg(long)]
    pub pixel: String,
    /// gradient, guided, ig[:steps], deeplift or deepliftshap.
    #[arg(long, default_value = "deeplift")]
    pub method: String,
    /// zero, raw-zero, const:<v>, raw-const:<v> or windows:<k>.
    #[arg(long, default_value = "zero")]
    pub baseline: String,
    #[arg(short = 'o', long)]
    pub output: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct AggregateArgs {
    /// One checkpoint per lead (repeatable).
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Target pixel row,col (repeatable).
    #[arg(long)]
    #[serde(default)]
    pub pixel: Vec<String>,
    /// Add this many ocean pixels drawn with --pixel-seed.
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub random_pixels: usize,
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub pixel_seed: u64,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Use only the first N windows of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value = "deeplift")]
    pub method: String,
    #[arg(long, default_value = "zero")]
    pub baseline: String,
    /// Radius (cells) for the locality share in the summary.
    #[arg(long, default_value_t = 8.0)]
    pub radius: f64,
    /// Reports root.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sample: usize,
    /// row0,col0,row1,col1, half-open.
    #[arg(long)]
    pub rect: String,
    /// `all`, or offsets such as -1,-2 and 0-based frame indices.
    #[arg(long, default_value = "all", allow_hyphen_values = true)]
    pub months: String,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub fill: f64,
    /// Interpret --fill in raw units instead of standardized ones.
    #[arg(long)]
    #[serde(default)]
    pub raw_fill: bool,
    #[arg(short = 'o', long)]
    pub output: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// lead=path (repeatable).
    #[arg(long, required = true)]
    pub ckpt: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Reports root written by `aggregate`.
    #[arg(long)]
    pub reports: Option<PathBuf>,
    /// Built UI bundle served at /.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    /// Attribution cache capacity.
    #[arg(long, default_value_t = 256)]
    pub cache: usize,
    /// Per-request time budget in milliseconds.
    #[arg(long, default_value_t = 60_000)]
    pub budget_ms: u64,
}
