//! Command-line front end: dataset generation, training, evaluation,
//! region activation maps and class-level region importance.

pub mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rcn_core::explainer::HeadKind;
use rcn_core::matcher::MetricKind;
use rcn_core::model::Aggregation;

pub use commands::{cmd_eval, cmd_explain, cmd_generalize, cmd_synth, cmd_train, RUN_CONFIG_FILE};

#[derive(Parser, Debug, Clone)]
#[command(
    name = "rcn",
    version,
    about = "Interpretable few-shot classification with region comparison networks"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GlobalArgs {
    /// Worker threads for evaluation [default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for episode sampling, initialization and sample selection
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, global = true, default_value = "rcn-out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Write the synthetic dataset as a directory of PNGs
    Synth(SynthArgs),
    /// Train a model episodically
    Train(TrainArgs),
    /// Evaluate on seeded episodes and report accuracy with a 95% interval
    Eval(EvalArgs),
    /// Export the region activation map of a support/query pair
    Explain(ExplainArgs),
    /// Rank the regions of a support sample by importance within its class
    Generalize(GeneralizeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Explain(_) => "explain",
            Command::Generalize(_) => "generalize",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DataArgs {
    /// Dataset directory with one subdirectory of PNG images per class
    /// [default: the built-in synthetic dataset]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed of the built-in synthetic dataset
    #[arg(long, default_value_t = 0)]
    pub synth_seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EpisodeArgs {
    /// Classes per episode (N)
    #[arg(long, default_value_t = 5)]
    pub way: usize,
    /// Support samples per class (K)
    #[arg(long, default_value_t = 1)]
    pub shot: usize,
    /// Query samples per class during evaluation (B)
    #[arg(long, default_value_t = 15)]
    pub queries: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for rcn_core::episodes::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Val => Self::Val,
            SplitArg::Test => Self::Test,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 25)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Train, val and test class counts
    #[arg(long, default_value = "15,5,5", value_parser = parse_triple)]
    pub splits: (usize, usize, usize),
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three comma-separated counts, got `{s}`")),
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Backbone preset: conv4-64 or conv4-32
    #[arg(long, default_value = "conv4-32")]
    pub backbone: String,
    /// Region weighting: fixed, learnable or meta
    #[arg(long, default_value = "meta")]
    pub head: HeadKind,
    /// Region similarity: cosine, tanimoto, expdist or invdist
    #[arg(long, default_value = "cosine")]
    pub metric: MetricKind,
    /// Region grid size h = w [default: the backbone's native grid]
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub hw: Option<u8>,
    /// K-shot score aggregation
    #[arg(long, value_enum, default_value = "mean")]
    pub aggregation: AggregationArg,
    /// Query samples per class during training [default: --queries]
    #[arg(long)]
    pub train_queries: Option<usize>,
    /// Iteration cap; 0 writes the initial checkpoint only
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    #[arg(long, default_value_t = 500)]
    pub episodes_per_iteration: usize,
    #[arg(long, default_value_t = 600)]
    pub val_episodes: usize,
    /// Test episodes evaluated on the best checkpoint after training (0 skips)
    #[arg(long, default_value_t = 600)]
    pub test_episodes: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Validation iterations without improvement before the rate is halved
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    /// Wall-clock limit for training in seconds
    #[arg(long)]
    pub time_budget: Option<f64>,
    /// Disable query augmentation
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationArg {
    Mean,
    Max,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Mean => Aggregation::Mean,
            AggregationArg::Max => Aggregation::Max,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerArg {
    /// The trained network from --checkpoint
    Model,
    /// Scores 1 for same-class pairs, 0 otherwise
    Oracle,
    /// Uniform random scores
    Random,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Checkpoint directory written by `train`
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    pub scorer: ScorerArg,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Number of seeded episodes
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint directory written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split to draw samples from
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Dataset index of the support sample [default: drawn by --seed]
    #[arg(long)]
    pub support: Option<usize>,
    /// Dataset index of the query sample [default: drawn by --seed from the support's class]
    #[arg(long)]
    pub query: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GeneralizeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint directory written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split to draw samples from
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Class name or index [default: drawn by --seed from the split]
    #[arg(long)]
    pub class: Option<String>,
    /// Dataset index of the support sample [default: drawn by --seed]
    #[arg(long)]
    pub support: Option<usize>,
    /// Number of same-class query samples
    #[arg(long, default_value_t = 10)]
    pub queries: usize,
}

/// Marks failures caused by the user's input rather than a defect.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

pub fn user_error(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

/// Exit status for a failed run: 1 for bad input, 2 for internal errors.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UserError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
        {
            return EXIT_USER;
        }
        if let Some(e) = cause.downcast_ref::<rcn_core::Error>() {
            return match e {
                rcn_core::Error::Shape { .. } | rcn_core::Error::NonFinite { .. } => EXIT_INTERNAL,
                _ => EXIT_USER,
            };
        }
    }
    EXIT_INTERNAL
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(user_error("--threads must be at least 1"));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => cmd_synth(g, a).map(|_| ()),
        Command::Train(a) => cmd_train(g, a).map(|_| ()),
        Command::Eval(a) => cmd_eval(g, a).map(|_| ()),
        Command::Explain(a) => cmd_explain(g, a).map(|_| ()),
        Command::Generalize(a) => cmd_generalize(g, a).map(|_| ()),
    }
}

/// Parses `args` and runs them, returning the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
