use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scop::pipeline::Criterion;
use scop::selection::ControlMode;

#[derive(Debug, Parser)]
#[command(name = "scop", version, about = "Knockoff-controlled filter pruning for small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network from scratch
    Pretrain(StageArgs),
    /// Fit the knockoff model and write the knockoff cache for the selection set
    Knockoff(KnockoffArgs),
    /// Learn per-filter scaling factors against a control stream
    Select(SelectArgs),
    /// Build a pruning plan and remove filters
    Prune(PruneArgs),
    /// Fine-tune a (pruned) network
    Finetune(FinetuneArgs),
    /// Report test accuracy and model size
    Eval(EvalArgs),
    /// Run the full pipeline and append a metrics record
    Run(RunArgs),
    /// Run every control mode with and without bias pairs
    Ablate(RunArgs),
    /// Planted-teacher ranking test and knockoff swap tests
    Diagnose(DiagnoseArgs),
    /// Metrics tables and real/knockoff feature histograms
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full desk-scale schedule (20 fine-tuning epochs)
    Default,
    /// A few CPU minutes per seed (1 fine-tuning epoch, 5000-image selection set)
    Quick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

fn parse_control(s: &str) -> Result<ControlMode, String> {
    s.parse().map_err(|e: scop::Error| e.to_string())
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse().map_err(|e: scop::Error| e.to_string())
}

/// Options shared by every pipeline command. Unset flags keep the config value.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON); built-in MNIST defaults when omitted
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Built-in schedule used when no --config is given
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Master seed for every stage [default: config value, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Architecture: small-cnn or resnet-tiny [default: config value, else small-cnn]
    #[arg(long)]
    pub arch: Option<String>,
    /// Dataset [default: config value, else mnist]
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetArg>,
    /// Dataset directory [default: config value, else data/<dataset>]
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Use only the first N training examples [default: config value, else all]
    #[arg(long, value_name = "N")]
    pub train_limit: Option<usize>,
    /// Use only the first N test examples [default: config value, else all]
    #[arg(long, value_name = "N")]
    pub test_limit: Option<usize>,
    /// Recompute outputs even if they already exist
    #[arg(long)]
    pub force: bool,
    /// Log stage progress to standard error
    #[arg(short, long)]
    pub verbose: bool,
}

/// Training-loop overrides for the stage being run.
#[derive(Debug, Clone, Args)]
pub struct TrainOverrides {
    /// Epochs [default: config value]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate [default: config value]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size [default: config value]
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct StageArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Output checkpoint
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct KnockoffArgs {
    #[command(flatten)]
    pub common: Common,
    /// Selection-set size [default: config value, else the whole training split]
    #[arg(long, value_name = "N")]
    pub examples: Option<usize>,
    /// Relative covariance ridge [default: config value, else 0.001]
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Output knockoff cache
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

/// Selection overrides.
#[derive(Debug, Clone, Args)]
pub struct SelectionOverrides {
    /// Control stream: knockoff, noise, random-sample or none [default: config value, else knockoff]
    #[arg(long, value_parser = parse_control)]
    pub control: Option<ControlMode>,
    /// Add correlated bias pairs after every convolution [default: config value, else on]
    #[arg(long, value_enum)]
    pub bias: Option<Switch>,
    /// Selection epochs [default: config value, else 10]
    #[arg(long)]
    pub selection_epochs: Option<usize>,
    /// Selection learning rate (Adam) [default: config value, else 0.001]
    #[arg(long)]
    pub selection_lr: Option<f64>,
    /// Selection-set size [default: config value]
    #[arg(long, value_name = "N")]
    pub examples: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub selection: SelectionOverrides,
    /// Pretrained network checkpoint
    #[arg(long, value_name = "FILE")]
    pub net: PathBuf,
    /// Knockoff cache (required for --control knockoff)
    #[arg(long, value_name = "FILE")]
    pub knockoffs: Option<PathBuf>,
    /// Output selection state
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

/// Pruning overrides.
#[derive(Debug, Clone, Args)]
pub struct PruneOverrides {
    /// Fraction of filters removed per layer, in [0, 1) [default: config value, else 0.5]
    #[arg(long)]
    pub rate: Option<f64>,
    /// Importance criterion: scop, l1 or random [default: config value, else scop]
    #[arg(long, value_parser = parse_criterion)]
    pub criterion: Option<Criterion>,
}

#[derive(Debug, Clone, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub prune: PruneOverrides,
    /// Network checkpoint to prune
    #[arg(long, value_name = "FILE")]
    pub net: PathBuf,
    /// Selection state (required for --criterion scop)
    #[arg(long, value_name = "FILE")]
    pub selection: Option<PathBuf>,
    /// Where to write the plan JSON [default: <out>.plan.json]
    #[arg(long, value_name = "FILE")]
    pub plan_out: Option<PathBuf>,
    /// Output checkpoint of the pruned network
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Network checkpoint to fine-tune
    #[arg(long, value_name = "FILE")]
    pub net: PathBuf,
    /// Output checkpoint
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Network checkpoint
    #[arg(long, value_name = "FILE")]
    pub net: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub selection: SelectionOverrides,
    #[command(flatten)]
    pub prune: PruneOverrides,
    /// Pretraining epochs [default: config value, else 2]
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Fine-tuning epochs [default: config value, else 20]
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Artifact store and metrics directory
    #[arg(long, value_name = "DIR", default_value = "scop-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    /// First seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Control modes to compare (comma separated)
    #[arg(long, value_delimiter = ',', value_parser = parse_control, default_value = "knockoff,none,noise,random-sample")]
    pub control: Vec<ControlMode>,
    /// Selection epochs on the planted task
    #[arg(long, default_value_t = 10)]
    pub selection_epochs: usize,
    /// Planted examples
    #[arg(long, default_value_t = 4096)]
    pub examples: usize,
    /// Write one JSON line per run here as well as to standard output
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Log progress to standard error
    #[arg(short, long)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Metrics JSON-lines file to tabulate
    #[arg(long, value_name = "FILE")]
    pub metrics: Option<PathBuf>,
    /// Network checkpoint for feature histograms
    #[arg(long, value_name = "FILE")]
    pub net: Option<PathBuf>,
    /// Knockoff cache aligned with the selection set
    #[arg(long, value_name = "FILE")]
    pub knockoffs: Option<PathBuf>,
    /// Layer indices to histogram (comma separated) [default: every prunable mix point]
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Examples per histogram
    #[arg(long, default_value_t = 256)]
    pub histogram_examples: usize,
    /// Directory for histogram CSV files
    #[arg(long, value_name = "DIR", default_value = "histograms")]
    pub out_dir: PathBuf,
}
