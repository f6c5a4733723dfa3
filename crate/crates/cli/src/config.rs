use std::path::Path;

use anyhow::Context;
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::{Deserialize, Serialize};

use medkgqa::autodiff::OptimConfig;
use medkgqa::corpus::SynthSpec;
use medkgqa::kg_embed::TransConfig;
use medkgqa::model::Ablation;
use medkgqa::trainer::TrainConfig;

use crate::args::{ReaderFlags, TrainKgArgs};
use crate::input_error;

pub const SEED_ENV: &str = "MEDKG_SEED";
pub const DEFAULT_SEED: u64 = 7;

/// Contents of a `--config` file. Every section is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub synth: Option<SynthSpec>,
    pub kg: Option<TransConfig>,
    pub train: Option<TrainConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag, then config file, then the environment, then the built-in default.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| input_error(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

pub fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

pub fn kg_config(base: Option<TransConfig>, a: &TrainKgArgs, m: &ArgMatches) -> TransConfig {
    let mut c = base.unwrap_or_default();
    if given(m, "model") {
        c.model = a.model();
    }
    if given(m, "dim") {
        c.dim = a.dim;
    }
    if given(m, "epochs") {
        c.epochs = a.epochs;
    }
    if given(m, "lr") {
        c.lr = a.lr;
    }
    if given(m, "margin") {
        c.margin = a.margin;
    }
    if given(m, "batch_size") {
        c.batch_size = a.batch_size;
    }
    if given(m, "negatives") {
        c.negatives = a.negatives;
    }
    c
}

/// Config-file reader settings overlaid with the flags given on the command
/// line.
pub fn train_config(base: Option<TrainConfig>, f: &ReaderFlags, hops: Option<usize>, m: &ArgMatches) -> anyhow::Result<TrainConfig> {
    let mut c = base.unwrap_or_default();
    if given(m, "epochs") {
        c.epochs = f.epochs;
    }
    if given(m, "batch_size") {
        c.batch_size = f.batch_size;
    }
    if given(m, "optimizer") || given(m, "lr") {
        let lr = if given(m, "lr") { f.lr } else { c.optimizer.lr };
        let kind = if given(m, "optimizer") { f.optimizer.as_str() } else { "" };
        c.optimizer = match kind {
            "adam" => OptimConfig::adam(lr),
            "sgd" => OptimConfig::sgd(lr),
            _ => OptimConfig { lr, ..c.optimizer },
        };
    }
    if given(m, "patience") {
        c.patience = f.patience;
    }
    if given(m, "clip_norm") {
        c.clip_norm = (f.clip_norm > 0.0).then_some(f.clip_norm);
    }
    if let Some(h) = hops.filter(|_| given(m, "hops")) {
        c.model.gat.hops = h;
    }
    if given(m, "heads") {
        c.model.gat.heads = f.heads;
    }
    if given(m, "hidden") {
        c.model.reader.hidden = f.hidden;
    }
    if given(m, "word_dim") {
        c.model.reader.word_dim = f.word_dim;
    }
    if given(m, "knowledge_dim") {
        c.model.reader.knowledge_dim = f.knowledge_dim;
    }
    if f.fine_tune_knowledge {
        c.model.reader.fine_tune_knowledge = true;
    }
    if given(m, "max_subject_nodes") {
        c.model.caps.subject = f.max_subject_nodes;
    }
    if given(m, "max_reasoning_nodes") {
        c.model.caps.reasoning = f.max_reasoning_nodes;
    }
    if given(m, "max_mention_nodes") {
        c.model.caps.mention = f.max_mention_nodes;
    }
    if given(m, "max_candidate_nodes") {
        c.model.caps.candidate = f.max_candidate_nodes;
    }
    if !f.ablation.is_empty() {
        let mut a = c.model.ablation.clone();
        for flag in &f.ablation {
            a.set(flag, true).map_err(|e| input_error(e.to_string()))?;
        }
        a.validate().map_err(|e| input_error(e.to_string()))?;
        c.model.ablation = a;
    }
    Ok(c)
}

/// Parses an ablation arm such as `drop_mention_nodes+merge_edge_types`.
pub fn parse_arm(arm: &str) -> anyhow::Result<Ablation> {
    let flags: Vec<&str> = arm.split('+').map(str::trim).filter(|s| !s.is_empty()).collect();
    if flags.is_empty() {
        return Err(input_error(format!("empty ablation arm {arm:?}")));
    }
    Ablation::from_flags(&flags).map_err(|e| input_error(format!("ablation arm {arm:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_parsing() {
        let a = parse_arm("drop_mention_nodes+merge_edge_types").unwrap();
        assert!(a.drop_mention_nodes && a.merge_edge_types);
        assert!(parse_arm("no_such_flag").is_err());
        assert!(parse_arm("").is_err());
        assert!(parse_arm("no_graph_reasoning+merge_edge_types").is_err());
    }

    #[test]
    fn partial_config_file_keeps_defaults() {
        let c: FileConfig = toml::from_str("seed = 3\n[train]\nepochs = 2\n[train.model.gat]\nhops = 4\n").unwrap();
        assert_eq!(c.seed, Some(3));
        let t = c.train.unwrap();
        assert_eq!(t.epochs, 2);
        assert_eq!(t.model.gat.hops, 4);
        assert_eq!(t.batch_size, TrainConfig::default().batch_size);
        assert!(toml::from_str::<FileConfig>("bogus = 1").is_err());
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some(2)).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some(2)).unwrap(), 2);
    }
}
