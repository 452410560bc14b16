use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use halluscope::SeMode;

#[derive(Debug, Parser)]
#[command(name = "halluscope", version, about = "Residual-stream hallucination scoring lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the planted toy decoder and write it as a model container
    GenModel(GenModelArgs),
    /// Generate a labeled synthetic corpus with traces
    GenCorpus(GenCorpusArgs),
    /// Re-trace a dataset with a model, optionally with attention noise
    Trace(TraceArgs),
    /// Cluster each record's sampled answers by bidirectional entailment
    Cluster(ClusterArgs),
    /// Compute per-record semantic entropy
    Se(SeArgs),
    /// Train one entropy probe per layer on the training split
    TrainProbe(TrainProbeArgs),
    /// Score records; selects heads and layers on the training split unless a config is given
    Score(ScoreArgs),
    /// Compare score component combinations and write correlation series
    Ablate(AblateArgs),
    /// Score records under attention noise and FFN erasure
    Intervene(InterveneArgs),
    /// Fit a threshold on the training split and report test metrics
    Evaluate(EvaluateArgs),
    /// Inspect a container or dataset file
    Formats(FormatsArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory; every artifact and the manifest go here
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Worker threads for record-level parallelism
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    /// Seconds to wait for each external judge reply (judge command from HALLUSCOPE_JUDGE_CMD)
    #[arg(long, value_name = "SECS", default_value_t = 30)]
    pub judge_timeout: u64,
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    /// Corpus spec (JSON); its model section and seed are used
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Seed; overrides the --spec file [default: 7]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Corpus spec (JSON); flags override its values
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Existing model container to trace with instead of building one
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Seed; overrides the --spec file [default: 7]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of records; overrides the --spec file
    #[arg(long, value_name = "N")]
    pub n_records: Option<usize>,
    /// Use the null plant (labels carry no signal)
    #[arg(long)]
    pub null: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Dataset (JSONL)
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// Model container
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Gaussian noise scale added to attention logits
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Noise seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Dataset (JSONL) with sampled responses
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub judge: JudgeArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SeArgs {
    /// Dataset (JSONL) with sampled responses
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// Entropy variant: standard or paper_literal
    #[arg(long, default_value_t = SeMode::Standard)]
    pub mode: SeMode,
    #[command(flatten)]
    pub judge: JudgeArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainProbeArgs {
    /// Dataset (JSONL) with traces and sampled responses
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// First layer to train a probe for [default: the trace's scoring floor]
    #[arg(long, value_name = "L")]
    pub layer_floor: Option<usize>,
    /// Entropy variant the probes learn: standard or paper_literal
    #[arg(long, default_value_t = SeMode::Standard)]
    pub mode: SeMode,
    /// Full-batch gradient steps
    #[arg(long, default_value_t = halluscope::probe::DEFAULT_EPOCHS)]
    pub epochs: usize,
    /// Learning rate
    #[arg(long, default_value_t = halluscope::probe::DEFAULT_LR)]
    pub lr: f64,
    /// Recorded in the probe metadata; training itself is deterministic
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub judge: JudgeArgs,
    #[command(flatten)]
    pub common: Common,
}

/// Regression settings shared by the scoring subcommands. Flags override
/// values from `--config`.
#[derive(Debug, Args)]
pub struct RegressionArgs {
    /// Entropy probes container
    #[arg(long, value_name = "FILE")]
    pub probes: PathBuf,
    /// Regression config (JSON); skips head/layer selection
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Weight of the parametric term [default: 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the context term [default: 0.2]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Percent of context tokens in each attended set [default: 10]
    #[arg(long, value_name = "K")]
    pub k_percent: Option<f64>,
    /// Copy heads to select
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub n_heads: usize,
    /// FFN layers to select
    #[arg(long, value_name = "N", default_value_t = 2)]
    pub n_ffn: usize,
    /// First layer eligible for selection [default: the trace's scoring floor]
    #[arg(long, value_name = "L")]
    pub layer_floor: Option<usize>,
    /// Mitigation: copy-head amplification (> 1)
    #[arg(long)]
    pub mu: Option<f64>,
    /// Mitigation: FFN suppression, in (0, 1)
    #[arg(long)]
    pub nu: Option<f64>,
    /// Mitigation: token-score trigger threshold
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Dataset (JSONL) with traces
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub reg: RegressionArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset (JSONL) with traces
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// Model container; needed for the logit-lens components
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[command(flatten)]
    pub reg: RegressionArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    /// Dataset (JSONL)
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// Model container
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Attention-logit noise scale
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    /// FFN layers erased per record [default: a quarter of the layers, rounded up]
    #[arg(long, value_name = "N")]
    pub erase: Option<usize>,
    /// Seed for noise and erased-layer draws
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also decode this many tokens per record with mitigation (needs --mu --nu --tau or a config block)
    #[arg(long, value_name = "N")]
    pub generate: Option<usize>,
    #[command(flatten)]
    pub reg: RegressionArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Scores (JSONL) written by `score`
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    /// Fixed decision threshold instead of fitting one on the training split
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FormatsArgs {
    /// Container (.srtr) or dataset (JSONL) file
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[command(flatten)]
    pub common: Common,
}
