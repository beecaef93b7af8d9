use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mucrasp", version, about = "Reasoning-aware structured pruning for a toy multimodal decoder")]
pub struct Cli {
    /// Flat key=value file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for per-sample parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic calibration corpus.
    GenData(GenDataArgs),
    /// Train a model with plain SGD on a corpus.
    Train(TrainArgs),
    /// Write an importance table.
    Score(ScoreArgs),
    /// Build a pruning plan and the pruned checkpoint.
    Prune(PruneArgs),
    /// Compare a pruned checkpoint against its dense parent.
    Eval(EvalArgs),
    /// Sliding-window MLP zero-out ablation.
    Ablate(AblateArgs),
    /// Prune and evaluate several methods on identical inputs.
    Compare(CompareArgs),
    /// Merge plans and evaluation reports into one table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SeedArg {
    #[arg(long, env = "MUCRASP_SEED", default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 128)]
    pub n: usize,
    /// Take the embedding width and context length from this checkpoint
    /// instead of the default toy config.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub seed: SeedArg,
    /// Starting checkpoint; without it the toy config is initialized from the seed.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreMode {
    Global,
    Pivot,
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PivotArg {
    Real,
    Random,
    None,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "global")]
    pub mode: ScoreMode,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, value_enum)]
    pub pivot: Option<PivotArg>,
    /// Score GQA groups from their Q and O slices only.
    #[arg(long)]
    pub qo_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Mucrasp,
    Taylor,
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AllocationArg {
    Global,
    Layerwise,
}

#[derive(Debug, Clone, Args)]
pub struct PruneOpts {
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 0.3)]
    pub ratio: f64,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub gamma_base: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, value_enum)]
    pub pivot: Option<PivotArg>,
    #[arg(long)]
    pub no_cmds: bool,
    #[arg(long, value_enum, default_value = "global")]
    pub allocation: AllocationArg,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "mucrasp")]
    pub mode: MethodArg,
    #[command(flatten)]
    pub opts: PruneOpts,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
    /// Output directory for plan.json, pruned.ckpt and retention.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dense: PathBuf,
    #[arg(long)]
    pub pruned: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Plan that produced the pruned model; supplies method, ratio and retention.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    /// Report JSON; a CSV summary is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub window_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub opts: PruneOpts,
    #[arg(long, value_delimiter = ',', default_value = "mucrasp,taylor,magnitude")]
    pub methods: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub plan: Vec<PathBuf>,
    /// Evaluation, ablation or comparison JSON files.
    #[arg(long)]
    pub eval: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
