use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsets_core::baselines::BaselineKind;
use tsets_core::{Ablation, GraphMode};

mod commands;

/// Temporal sets prediction: preprocess set sequences, train the graph and
/// attention model, evaluate it against baselines and rank next-set elements.
#[derive(Parser, Debug)]
#[command(name = "tsets", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary, filter sequences and split users into a dataset file.
    Preprocess(PreprocessArgs),
    /// Train a model and write the best checkpoint plus a CSV log.
    Train(TrainArgs),
    /// Score a checkpoint or a baseline with Recall, NDCG and PHR at each K.
    Eval(EvalArgs),
    /// Rank the next-set elements for one user's history.
    Predict(PredictArgs),
    /// Generate synthetic JSONL data with planted structure.
    Synth(SynthArgs),
    /// Finite-difference audit of every parameter gradient on a toy user.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Raw JSONL, one `{"user": .., "sets": [[..], ..]}` per line.
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Fraction of element occurrences the vocabulary must cover.
    #[arg(long, default_value_t = 0.8)]
    coverage: f64,
    #[arg(long, default_value_t = 2)]
    min_history: usize,
    /// Most recent sets kept per user, target included.
    #[arg(long, default_value_t = 20)]
    t_max: usize,
    /// Train, validation and test ratios.
    #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0.7,0.1,0.2")]
    split: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags that override the JSON training config.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// JSON training config; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// L2 weight on all parameters.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    conv_dim: Option<usize>,
    #[arg(long)]
    conv_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// full, no-erl, no-tdl or neither.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long, value_parser = parse_graph_mode)]
    graph_mode: Option<GraphMode>,
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    normalized_aggregation: bool,
    #[arg(long)]
    select_k: Option<usize>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset written by `preprocess`.
    #[arg(short, long)]
    data: PathBuf,
    /// Directory for checkpoint.json, train_log.csv and config.json.
    #[arg(short, long)]
    out: PathBuf,
    /// Train on this fraction of the training users.
    #[arg(long)]
    train_fraction: Option<f64>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(short, long)]
    data: PathBuf,
    #[arg(short, long, required_unless_present = "baseline", conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    /// top, personal-top or element-transfer.
    #[arg(long)]
    baseline: Option<BaselineKind>,
    /// Overrides the ablation stored in the checkpoint.
    #[arg(long, requires = "checkpoint")]
    ablation: Option<Ablation>,
    /// Fit the baseline on this fraction of the training users.
    #[arg(long, requires = "baseline")]
    train_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cutoffs, one output row each.
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40")]
    k: Vec<usize>,
    /// Users to score: test or valid.
    #[arg(long, default_value = "test", value_parser = ["test", "valid"])]
    split: String,
    /// Write the metrics table here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Per-user rows as CSV.
    #[arg(long)]
    per_user: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(short, long)]
    checkpoint: PathBuf,
    /// History as a JSON array of sets of raw ids, e.g. `[["a","b"],["c"]]`.
    #[arg(long, conflicts_with = "history_file", required_unless_present = "history_file")]
    history: Option<String>,
    #[arg(long)]
    history_file: Option<PathBuf>,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(subcommand)]
    kind: SynthKind,
    /// Output JSONL; stdout when absent.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum SynthKind {
    /// Personal baskets re-emitted with a fixed probability.
    Repeat {
        #[arg(long, default_value_t = 100)]
        users: usize,
        #[arg(long, default_value_t = 30)]
        elements: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        basket_size: usize,
        #[arg(long, default_value_t = 0.8)]
        p_repeat: f64,
        #[arg(long, default_value_t = 1)]
        noise: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cue elements that pull in a fixed partner.
    Cooccur {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 40)]
        elements: usize,
        #[arg(long, default_value_t = 6)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        cues_per_set: usize,
        #[arg(long, default_value_t = 0.9)]
        pair_strength: f64,
        #[arg(long, default_value_t = 1)]
        noise: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check every ablation with one and two heads instead of the configured model.
    #[arg(long)]
    all: bool,
    /// Write the reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

fn parse_graph_mode(s: &str) -> Result<GraphMode, String> {
    match s {
        "masked" => Ok(GraphMode::Masked),
        "static" => Ok(GraphMode::Static),
        _ => Err(format!("unknown graph mode {s:?}, expected masked or static")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Synth(a) => commands::synth(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
