use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use medkgqa::graph::{Caps, ExportFormat};
use medkgqa::kg_embed::{TransConfig, TransModel};
use medkgqa::model::Ablation;
use medkgqa::trainer::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "medkgqa", version, about = "Knowledge-graph augmented multi-hop reader for drug-drug interactions")]
pub struct Cli {
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with planted reasoning chains.
    Synth(SynthArgs),
    /// Train TransE or TransH embeddings on a knowledge base.
    TrainKg(TrainKgArgs),
    /// Build and export one sample's reasoning graph.
    BuildGraph(BuildGraphArgs),
    /// Train the reader (plain train/dev split, or k-fold with --cv-folds).
    TrainReader(TrainReaderArgs),
    /// Evaluate a reader checkpoint on a samples file.
    EvalReader(EvalReaderArgs),
    /// Retrain once per hop count.
    Sweep(SweepArgs),
    /// Retrain once per ablation arm.
    Ablate(AblateArgs),
    /// k-fold cross validation over the whole samples file.
    Cv(CvArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML config file; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Seed. Falls back to the config file, then $MEDKG_SEED, then 7.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Overwrite a non-empty output location.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Corpus spec as TOML (any subset of the spec keys).
    #[arg(long)]
    pub spec: Option<PathBuf>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Number of samples (overrides the spec).
    #[arg(long)]
    pub samples: Option<usize>,

    #[command(flatten)]
    pub common: Common,
}

fn kg() -> TransConfig {
    TransConfig::default()
}

#[derive(Args, Debug)]
pub struct TrainKgArgs {
    /// Directory holding triplets.tsv and pathways.tsv.
    #[arg(long)]
    pub kb: PathBuf,

    /// Embedding file to write; the report goes beside it.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value_t = kg().model.as_str().to_string(), value_parser = ["transe", "transh"])]
    pub model: String,

    #[arg(long, default_value_t = kg().dim)]
    pub dim: usize,

    #[arg(long, default_value_t = kg().epochs)]
    pub epochs: usize,

    #[arg(long, default_value_t = kg().lr)]
    pub lr: f64,

    #[arg(long, default_value_t = kg().margin)]
    pub margin: f64,

    #[arg(long, default_value_t = kg().batch_size)]
    pub batch_size: usize,

    #[arg(long, default_value_t = kg().negatives)]
    pub negatives: usize,

    /// Hold out this fraction of triplets for evaluation; 0 evaluates on
    /// the training facts.
    #[arg(long, default_value_t = 0.0)]
    pub test_fraction: f64,

    #[command(flatten)]
    pub common: Common,
}

impl TrainKgArgs {
    pub fn model(&self) -> TransModel {
        self.model.parse().expect("validated by clap")
    }
}

#[derive(Args, Debug)]
pub struct BuildGraphArgs {
    /// Sample id.
    #[arg(long)]
    pub sample: String,

    /// Directory holding samples.json.
    #[arg(long)]
    pub data: PathBuf,

    /// Knowledge base directory (defaults to --data).
    #[arg(long)]
    pub kb: Option<PathBuf>,

    /// Output file.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value = "dot", value_parser = parse_format)]
    pub format: ExportFormat,

    /// Reader checkpoint; adds attention weights and candidate scores.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,

    #[command(flatten)]
    pub common: Common,
}

fn parse_format(s: &str) -> Result<ExportFormat, String> {
    s.parse().map_err(|e: medkgqa::Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Directory holding samples.json.
    #[arg(long)]
    pub data: PathBuf,

    /// Knowledge base directory (defaults to --data).
    #[arg(long)]
    pub kb: Option<PathBuf>,

    /// TransE embedding file (random fallback vectors when absent).
    #[arg(long)]
    pub transe: Option<PathBuf>,

    /// TransH embedding file (random fallback vectors when absent).
    #[arg(long)]
    pub transh: Option<PathBuf>,
}

impl DataArgs {
    pub fn kb_dir(&self) -> &PathBuf {
        self.kb.as_ref().unwrap_or(&self.data)
    }
}

fn tc() -> TrainConfig {
    TrainConfig::default()
}

fn caps() -> Caps {
    Caps::default()
}

/// Reader hyperparameters. Only flags given on the command line override
/// the config file.
#[derive(Args, Debug)]
pub struct ReaderFlags {
    #[arg(long, default_value_t = tc().epochs)]
    pub epochs: usize,

    #[arg(long, default_value_t = tc().batch_size)]
    pub batch_size: usize,

    #[arg(long, default_value_t = tc().optimizer.lr)]
    pub lr: f64,

    #[arg(long, default_value = "adam", value_parser = ["adam", "sgd"])]
    pub optimizer: String,

    /// Epochs without dev improvement before stopping.
    #[arg(long, default_value_t = tc().patience)]
    pub patience: usize,

    /// Gradient norm clip; 0 disables.
    #[arg(long, default_value_t = tc().clip_norm.unwrap_or(0.0))]
    pub clip_norm: f64,

    #[arg(long, default_value_t = tc().model.gat.heads)]
    pub heads: usize,

    #[arg(long, default_value_t = tc().model.reader.hidden)]
    pub hidden: usize,

    #[arg(long, default_value_t = tc().model.reader.word_dim)]
    pub word_dim: usize,

    #[arg(long, default_value_t = tc().model.reader.knowledge_dim)]
    pub knowledge_dim: usize,

    /// Train the knowledge embeddings along with the reader.
    #[arg(long)]
    pub fine_tune_knowledge: bool,

    #[arg(long, default_value_t = caps().subject)]
    pub max_subject_nodes: usize,

    #[arg(long, default_value_t = caps().reasoning)]
    pub max_reasoning_nodes: usize,

    #[arg(long, default_value_t = caps().mention)]
    pub max_mention_nodes: usize,

    #[arg(long, default_value_t = caps().candidate)]
    pub max_candidate_nodes: usize,

    /// Ablation switch to apply (repeatable).
    #[arg(long = "ablation", value_parser = Ablation::FLAGS)]
    pub ablation: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainReaderArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Dev set size taken from the end of samples.json [default: a fifth].
    #[arg(long, conflicts_with = "cv_folds")]
    pub dev_count: Option<usize>,

    /// Switch to k-fold cross validation over all samples.
    #[arg(long)]
    pub cv_folds: Option<usize>,

    /// Message passing rounds.
    #[arg(long, default_value_t = tc().model.gat.hops)]
    pub hops: usize,

    #[command(flatten)]
    pub flags: ReaderFlags,

    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EvalReaderArgs {
    /// Samples JSON file to evaluate.
    #[arg(long)]
    pub samples: PathBuf,

    /// Knowledge base directory.
    #[arg(long)]
    pub kb: PathBuf,

    /// Reader checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub out: PathBuf,

    #[arg(long)]
    pub dev_count: Option<usize>,

    /// Hop counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "3,4,5,6")]
    pub hops: Vec<usize>,

    #[command(flatten)]
    pub flags: ReaderFlags,

    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub out: PathBuf,

    #[arg(long)]
    pub dev_count: Option<usize>,

    /// Arm to compare with the full model; join switches with '+' for a
    /// combined arm (repeatable) [default: every switch on its own].
    #[arg(long = "flag")]
    pub arms: Vec<String>,

    /// Message passing rounds.
    #[arg(long, default_value_t = tc().model.gat.hops)]
    pub hops: usize,

    #[command(flatten)]
    pub flags: ReaderFlags,

    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value_t = 9)]
    pub folds: usize,

    /// Message passing rounds.
    #[arg(long, default_value_t = tc().model.gat.hops)]
    pub hops: usize,

    #[command(flatten)]
    pub flags: ReaderFlags,

    #[command(flatten)]
    pub common: Common,
}
