//! Command-line flags.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pnp_core::attention::AttentionVariant;
use pnp_core::scene::Task;
use pnp_core::transport::TransportVariant;

#[derive(Debug, Parser)]
#[command(name = "pnp", version, about = "Planar pick-and-place learning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record oracle demonstrations into a dataset directory.
    GenData(GenDataArgs),
    /// Train an attention or transport module, saving snapshots.
    Train(TrainArgs),
    /// Evaluate checkpoints and append the results to a records CSV.
    Eval(EvalArgs),
    /// Rank hyperparameters of a records CSV and filter them greedily.
    Analyze(AnalyzeArgs),
    /// Run the teaching service over HTTP.
    Serve(ServeArgs),
    /// Run a scripted teaching session that accepts every proposal.
    Teach(TeachArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModuleArg {
    Attention,
    Transport,
}

#[derive(Debug, Clone, Args)]
pub struct CameraArgs {
    /// Observation side in pixels.
    #[arg(long, default_value_t = 160)]
    pub pixels: usize,
    /// Workspace side in metres.
    #[arg(long, default_value_t = 0.5)]
    pub workspace: f64,
}

#[derive(Debug, Clone, Args)]
pub struct NetArgs {
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 2)]
    pub stages: usize,
    #[arg(long, default_value_t = 0)]
    pub blocks: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub task: Task,
    /// Number of demonstrations; kits demonstrations hold five samples.
    #[arg(long, alias = "count")]
    pub demos: u64,
    /// Demonstration `i` uses scene seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub camera: CameraArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub module: ModuleArg,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    /// Steps at which to save a checkpoint besides the final one.
    #[arg(long, value_delimiter = ',')]
    pub snapshots: Vec<u64>,
    #[arg(long, default_value = "ic")]
    pub attention_variant: AttentionVariant,
    #[arg(long, default_value = "qr")]
    pub transport_variant: TransportVariant,
    /// `discrete[:bins]` or `exact[:negatives]`.
    #[arg(long, default_value = "exact")]
    pub train_method: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = pnp_core::nets::DEFAULT_LR)]
    pub lr: f64,
    /// Rotation patch (attention) or query crop (transport) side, pixels.
    #[arg(long)]
    pub crop: Option<usize>,
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint stem; a `.json` or `.pnpw` suffix is ignored.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub task: Task,
    #[arg(long, default_value_t = 50)]
    pub scenes: usize,
    /// `discrete[:bins]` or `iter:<iters>:<rots>:<scale>`; repeatable.
    /// Defaults to discrete plus iterative scales 2, 4 and 6.
    #[arg(long = "infer-method")]
    pub infer_methods: Vec<String>,
    /// Scene `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 1_000_000)]
    pub seed: u64,
    /// Expected variants; a checkpoint with another variant is rejected.
    #[arg(long)]
    pub attention_variant: Option<AttentionVariant>,
    #[arg(long)]
    pub transport_variant: Option<TransportVariant>,
    /// Demonstration count for the records; read from the training run
    /// config when omitted.
    #[arg(long)]
    pub demos: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Records CSV to append to; defaults to `<out>/records.csv`.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, default_value = "attention")]
    pub module: pnp_core::analysis::Module,
    /// `rotation_deg`, `translation_cm` or `success_rate`.
    #[arg(long, default_value = "rotation_deg")]
    pub metric: pnp_core::analysis::Metric,
    /// Defaults to maximize for success rate and minimize otherwise.
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    #[arg(long, default_value_t = 200)]
    pub trees: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ServiceArgs {
    /// Directory holding session state, datasets and weights.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps_per_demo: u64,
    #[arg(long, default_value = "ic")]
    pub attention_variant: AttentionVariant,
    #[arg(long, default_value = "qr")]
    pub transport_variant: TransportVariant,
    /// Training method of both modules: `discrete` or `exact`.
    #[arg(long, default_value = "exact")]
    pub train_method: String,
    #[arg(long, default_value = "iter:3:6:4")]
    pub attention_infer: String,
    #[arg(long, default_value = "iter:3:12:4")]
    pub transport_infer: String,
    #[arg(long, default_value_t = 33)]
    pub attention_crop: usize,
    #[arg(long, default_value_t = 49)]
    pub transport_crop: usize,
    #[arg(long, default_value_t = pnp_core::nets::DEFAULT_LR)]
    pub lr: f64,
    /// Seeds model initialisation and training draws.
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    /// Checkpoint stems to start from instead of random weights.
    #[arg(long, requires = "transport_checkpoint")]
    pub attention_checkpoint: Option<PathBuf>,
    #[arg(long, requires = "attention_checkpoint")]
    pub transport_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub camera: CameraArgs,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[command(flatten)]
    pub service: ServiceArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TeachArgs {
    #[arg(long)]
    pub task: Task,
    #[arg(long, default_value_t = 10)]
    pub demos: u64,
    /// Scene seed of the session.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Success-rate test scenes run after teaching; 0 skips the test.
    #[arg(long, default_value_t = 0)]
    pub test_scenes: usize,
    #[command(flatten)]
    pub service: ServiceArgs,
}
