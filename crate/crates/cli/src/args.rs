use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "relsynth", version, about = "Definition-only relation extraction with LLM-synthesized training data")]
pub struct Cli {
    /// Worker threads for per-relation loops and scoring (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Debug-level logging.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build and down-sample corpus stores.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Run a single synthesis step.
    #[command(subcommand)]
    Synthesize(SynthesizeCmd),
    /// Train the entailment classifier on labeled train/dev sets.
    Train(TrainArgs),
    /// Score every corpus instance with a trained model.
    Score(ScoreArgs),
    /// Sample model predictions used as feedback in the next round.
    #[command(subcommand)]
    Feedback(FeedbackCmd),
    /// The full iterative refinement loop.
    #[command(name = "loop", subcommand)]
    Loop(LoopCmd),
    /// Score, evaluate and run baselines on an evaluation group.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Derive a relation definition from a few labeled instances.
    DeriveDef(DeriveDefArgs),
    /// Summarize a run directory.
    Report(ReportArgs),
    /// Inspect and render prompt templates.
    #[command(subcommand)]
    Prompts(PromptsCmd),
    /// Write the bundled synthetic dataset.
    #[command(subcommand)]
    Synthetic(SyntheticCmd),
}

#[derive(Subcommand, Debug)]
pub enum CorpusCmd {
    /// Validate and deduplicate instance JSON lines into a store directory.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Uniformly sample `n` instances of a store.
    Downsample {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct LlmArgs {
    /// Chat backend. `mock` answers offline from fixtures and the synthetic-world script.
    #[arg(long, value_enum, default_value_t = LlmKind::Openai)]
    pub llm: LlmKind,
    /// Recorded replies (JSON lines) consulted first by the mock backend.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlmKind {
    Openai,
    Mock,
}

#[derive(Args, Debug, Clone)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Reference)]
    pub backend: BackendKind,
    /// Worker command line, e.g. "repal-worker --base roberta-large-mnli".
    #[arg(long)]
    pub worker_cmd: Option<String>,
    /// Where the reference backend keeps model weights.
    #[arg(long)]
    pub models: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Reference,
    Worker,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Run config (JSON); unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `rng_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct RelationArgs {
    /// Definitions file: JSON array or JSON lines.
    #[arg(long)]
    pub definitions: PathBuf,
    #[arg(long)]
    pub relation: String,
}

#[derive(Subcommand, Debug)]
pub enum SynthesizeCmd {
    /// Initial positives (three prompt styles) and corpus-sampled negatives.
    Init {
        #[command(flatten)]
        rel: RelationArgs,
        /// Corpus store directory or instance JSON-lines file.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Render and write the prompts without calling any backend.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// One follow-up turn per positive thread, each with a feedback group.
    Followup {
        #[command(flatten)]
        rel: RelationArgs,
        /// Directory holding `pos-brief.json`, `pos-medium.json`, `pos-implicit.json`.
        #[arg(long)]
        threads: PathBuf,
        /// Feedback groups written by `feedback sample --purpose followup-positive`.
        #[arg(long)]
        feedback: PathBuf,
        #[arg(long, default_value_t = 15)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        iteration: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Negative definitions from feedback, then negative instances from them.
    Negatives {
        #[command(flatten)]
        rel: RelationArgs,
        /// Feedback written by `feedback sample --purpose negdef`.
        #[arg(long)]
        feedback: PathBuf,
        /// Negative definitions from earlier rounds (JSON array).
        #[arg(long)]
        previous: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        n_defs: usize,
        #[arg(long, default_value_t = 15)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        iteration: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        llm: LlmArgs,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub rel: RelationArgs,
    /// Labeled pairs (JSON lines of `{"instance", "label"}`).
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub rel: RelationArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 1)]
    pub iteration: u32,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    FollowupPositive,
    Negdef,
}

#[derive(Subcommand, Debug)]
pub enum FeedbackCmd {
    /// Sample high-confidence predictions from a score table.
    Sample {
        /// Directory holding `scores.jsonl` and `scores.meta.json`.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        purpose: Purpose,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Labeled-pair files whose instances must not be sampled.
        #[arg(long)]
        exclude: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying the confidence bands.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum LoopCmd {
    /// Start (or continue) a run.
    Run {
        #[arg(long)]
        definitions: PathBuf,
        /// Comma-separated relation ids (default: every definition).
        #[arg(long, value_delimiter = ',')]
        relations: Vec<String>,
        #[arg(long)]
        iterations: Option<u32>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        llm: LlmArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Continue an interrupted run from its checkpoints.
    Resume {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Must match the config the run was started with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        llm: LlmArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineName {
    Random,
    BinaryChoice,
    QaBinary,
}

#[derive(Subcommand, Debug)]
pub enum EvalCmd {
    /// Score a group with the final model of every relation in a run.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        group: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Evaluate prediction records against a group.
    Run {
        #[arg(long)]
        group: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random-guess or LLM prompting baselines.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineName,
        #[arg(long)]
        group: PathBuf,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Required by the LLM baselines.
        #[arg(long)]
        definitions: Option<PathBuf>,
        /// Instances per relation kept for the LLM baselines.
        #[arg(long, default_value_t = 30)]
        per_relation: usize,
        #[arg(long, default_value = "gpt-4o-2024-05-13")]
        model: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        llm: LlmArgs,
    },
}

#[derive(Args, Debug)]
pub struct DeriveDefArgs {
    /// Few-shot instances (JSON lines).
    #[arg(long)]
    pub shots: PathBuf,
    /// Relation id (default: the `relation` field of the shots).
    #[arg(long)]
    pub relation_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub llm: LlmArgs,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Subcommand, Debug)]
pub enum PromptsCmd {
    /// Render one template from a JSON object of slot values.
    Render {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        slots: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List template kinds and their slots.
    List,
}

#[derive(Subcommand, Debug)]
pub enum SyntheticCmd {
    Write {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}
