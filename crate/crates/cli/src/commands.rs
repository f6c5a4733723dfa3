use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ArgMatches;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use medkgqa::corpus::{load_samples, save_samples, synth_generate, tokenize, EntityCatalog, Sample, SynthSpec, SAMPLES_FILE};
use medkgqa::graph::{build_graph as build_sample_graph, export_graph, BuildOptions};
use medkgqa::kb::{KnowledgeBase, PATHWAYS_FILE, TRIPLETS_FILE};
use medkgqa::kg_embed::{eval_link_prediction_on, split_triplets, train_embeddings, EmbeddingTable, LinkPredictionReport};
use medkgqa::model::{Ablation, Model};
use medkgqa::trainer::{
    ablate as run_ablation, ablation_table, cross_validate, evaluate, hop_sweep, sweep_table, text_table, train, EpochStats,
    EvalReport, FoldResult, Knowledge, TrainConfig,
};

use crate::args::*;
use crate::config::{self, FileConfig};
use crate::input_error;
use crate::manifest::{manifest_path, Recorder};

/// An output directory must be absent or empty unless `force` is set.
fn prepare_dir(out: &Path, force: bool) -> anyhow::Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(input_error(format!("{} exists and is not a directory", out.display())));
        }
        let non_empty = fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(input_error(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn prepare_file(out: &Path, force: bool) -> anyhow::Result<()> {
    if out.exists() && !force {
        return Err(input_error(format!("{} exists; pass --force to overwrite", out.display())));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

fn write_json(path: &Path, value: &impl Serialize, rec: &mut Recorder) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
    rec.output(path);
    Ok(())
}

fn write_text(path: &Path, text: &str, rec: &mut Recorder) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    rec.output(path);
    Ok(())
}

fn load_kb(dir: &Path, rec: &mut Recorder) -> anyhow::Result<KnowledgeBase> {
    let kb = KnowledgeBase::load_dir(dir).with_context(|| format!("loading knowledge base from {}", dir.display()))?;
    for f in [TRIPLETS_FILE, PATHWAYS_FILE] {
        let p = dir.join(f);
        if p.exists() {
            rec.input(&p)?;
        }
    }
    Ok(kb)
}

fn load_sample_file(path: &Path, rec: &mut Recorder) -> anyhow::Result<Vec<Sample>> {
    let samples = load_samples(path).with_context(|| format!("loading samples from {}", path.display()))?;
    rec.input(path)?;
    if samples.is_empty() {
        return Err(input_error(format!("{} holds no samples", path.display())));
    }
    Ok(samples)
}

fn load_table(path: Option<&PathBuf>, rec: &mut Recorder) -> anyhow::Result<Option<EmbeddingTable>> {
    let Some(path) = path else { return Ok(None) };
    let t = EmbeddingTable::import(path).with_context(|| format!("loading embeddings from {}", path.display()))?;
    rec.input(path)?;
    Ok(Some(t))
}

/// Everything a reader subcommand needs from `DataArgs`.
struct ReaderInputs {
    samples: Vec<Sample>,
    kb: KnowledgeBase,
    transe: Option<EmbeddingTable>,
    transh: Option<EmbeddingTable>,
}

impl ReaderInputs {
    fn load(d: &DataArgs, rec: &mut Recorder) -> anyhow::Result<Self> {
        let samples = load_sample_file(&d.data.join(SAMPLES_FILE), rec)?;
        let kb = load_kb(d.kb_dir(), rec)?;
        let transe = load_table(d.transe.as_ref(), rec)?;
        let transh = load_table(d.transh.as_ref(), rec)?;
        Ok(Self {
            samples,
            kb,
            transe,
            transh,
        })
    }

    fn knowledge(&self) -> Knowledge<'_> {
        Knowledge {
            transe: self.transe.as_ref(),
            transh: self.transh.as_ref(),
        }
    }

    /// Without an explicit size the knowledge dimension follows the loaded
    /// tables; an explicit size must agree with them.
    fn match_knowledge_dim(&self, cfg: &mut TrainConfig, explicit: bool) -> anyhow::Result<()> {
        for (name, t) in [("transe", &self.transe), ("transh", &self.transh)] {
            let Some(t) = t else { continue };
            if explicit && t.dim != cfg.model.reader.knowledge_dim {
                return Err(input_error(format!(
                    "--knowledge-dim {} does not match the {name} table dimension {}",
                    cfg.model.reader.knowledge_dim, t.dim
                )));
            }
            cfg.model.reader.knowledge_dim = t.dim;
        }
        if let (Some(e), Some(h)) = (&self.transe, &self.transh) {
            if e.dim != h.dim {
                return Err(input_error(format!("transe and transh tables differ in dimension ({} vs {})", e.dim, h.dim)));
            }
        }
        Ok(())
    }

    /// Train and dev sets; the dev set is the last `dev_count` samples.
    fn split(&self, dev_count: Option<usize>) -> anyhow::Result<(&[Sample], &[Sample])> {
        let n = self.samples.len();
        let dev = dev_count.unwrap_or(n / 5);
        if dev >= n {
            return Err(input_error(format!("dev count {dev} leaves no training samples out of {n}")));
        }
        Ok(self.samples.split_at(n - dev))
    }
}

fn reader_config(
    file: &FileConfig,
    flags: &ReaderFlags,
    hops: Option<usize>,
    common: &Common,
    m: &ArgMatches,
) -> anyhow::Result<TrainConfig> {
    let mut c = config::train_config(file.train.clone(), flags, hops, m)?;
    c.seed = config::resolve_seed(common.seed, file.seed)?;
    c.validate().map_err(|e| input_error(e.to_string()))?;
    Ok(c)
}

pub fn synth(a: &SynthArgs, _m: &ArgMatches) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let mut spec = file.synth.clone().unwrap_or_default();
    let mut spec_seed = None;
    if let Some(path) = &a.spec {
        let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
        spec = toml::from_str::<SynthSpec>(&text).with_context(|| format!("parsing spec {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text)?;
        spec_seed = table.get("seed").and_then(|v| v.as_integer()).map(|s| s as u64);
    }
    if let Some(n) = a.samples {
        spec.n_samples = n;
    }
    spec.seed = config::resolve_seed(a.common.seed, file.seed.or(spec_seed))?;
    spec.validate()?;
    prepare_dir(&a.out, a.common.force)?;

    let mut rec = Recorder::new("synth", spec.seed, &spec)?;
    if let Some(path) = &a.spec {
        rec.input(path)?;
    }
    let corpus = synth_generate(&spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))?;
    for p in corpus.write(&a.out)? {
        rec.output(&p);
    }
    rec.finish(manifest_path(&a.out, true))?;
    println!(
        "wrote {} samples, {} triplets, {} pathway pairs to {}",
        corpus.samples.len(),
        corpus.kb.triplets().len(),
        corpus.kb.pathways().len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct KgReport {
    model: String,
    train_triplets: usize,
    eval_triplets: usize,
    /// True when evaluation ran on the training facts.
    evaluated_on_train: bool,
    raw: LinkPredictionReport,
    filtered: LinkPredictionReport,
    epoch_losses: Vec<f64>,
}

pub fn train_kg(a: &TrainKgArgs, m: &ArgMatches) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let cfg = config::kg_config(file.kg.clone(), a, m);
    cfg.validate().map_err(|e| input_error(e.to_string()))?;
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(input_error(format!("test fraction must be in [0, 1), got {}", a.test_fraction)));
    }
    let seed = config::resolve_seed(a.common.seed, file.seed)?;
    prepare_file(&a.out, a.common.force)?;

    let mut rec = Recorder::new("train-kg", seed, &cfg)?;
    let kb = load_kb(&a.kb, &mut rec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_set, test_set) = if a.test_fraction > 0.0 {
        split_triplets(&kb, a.test_fraction, &mut rng)
    } else {
        (kb.triplets().iter().cloned().collect(), Vec::new())
    };
    if train_set.is_empty() {
        return Err(input_error("no training triplets left after the split"));
    }
    let outcome = train_embeddings(&kb, &train_set, &cfg, &mut rng)?;
    outcome.table.export(&a.out)?;
    rec.output(&a.out);

    let eval_set = if test_set.is_empty() { &train_set } else { &test_set };
    let report = KgReport {
        model: cfg.model.as_str().to_string(),
        train_triplets: train_set.len(),
        eval_triplets: eval_set.len(),
        evaluated_on_train: test_set.is_empty(),
        raw: eval_link_prediction_on(&outcome.table, eval_set, kb.triplets(), false)?,
        filtered: eval_link_prediction_on(&outcome.table, eval_set, kb.triplets(), true)?,
        epoch_losses: outcome.epoch_losses,
    };
    write_json(&sibling(&a.out, ".report.json"), &report, &mut rec)?;
    rec.finish(manifest_path(&a.out, false))?;
    let rows: Vec<Vec<String>> = [("raw", &report.raw), ("filtered", &report.filtered)]
        .iter()
        .map(|(name, r)| {
            vec![
                name.to_string(),
                format!("{:.4}", r.mrr),
                format!("{:.2}", r.mr),
                format!("{:.4}", r.hits_at_10),
                format!("{:.4}", r.hits_at_3),
                format!("{:.4}", r.hits_at_1),
            ]
        })
        .collect();
    print!("{}", text_table(&["setting", "mrr", "mr", "hits@10", "hits@3", "hits@1"], &rows));
    Ok(())
}

pub fn build_graph(a: &BuildGraphArgs, _m: &ArgMatches) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = config::resolve_seed(a.common.seed, file.seed)?;
    let options = file.train.as_ref().map(|t| t.model.build_options()).unwrap_or_else(BuildOptions::default);
    let mut rec = Recorder::new("build-graph", seed, &options)?;
    let samples = load_sample_file(&a.data.join(SAMPLES_FILE), &mut rec)?;
    let kb = load_kb(a.kb.as_ref().unwrap_or(&a.data), &mut rec)?;
    let sample = samples
        .iter()
        .find(|s| s.id == a.sample)
        .ok_or_else(|| input_error(format!("no sample with id {:?}", a.sample)))?;
    prepare_file(&a.out, a.common.force)?;
    let catalog = EntityCatalog::build(&kb, &samples);

    let (graph, scores) = match &a.ckpt {
        Some(ckpt) => {
            let model = Model::load(ckpt, None).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            rec.input(ckpt)?;
            let p = model.prepare(sample, &kb, &catalog, false)?;
            let scores = model.graph_scores(&p)?;
            (p.graph, Some(scores))
        }
        None => {
            let docs: Vec<_> = sample.supports.iter().map(|d| tokenize(d, &catalog)).collect();
            (build_sample_graph(sample, &docs, &kb, &options, None)?, None)
        }
    };
    export_graph(&graph, scores.as_ref(), a.format, &a.out)?;
    rec.output(&a.out);
    rec.finish(manifest_path(&a.out, false))?;
    println!(
        "{}: {} nodes, {} edges written to {} ({})",
        a.sample,
        graph.nodes.len(),
        graph.edges.len(),
        a.out.display(),
        a.format
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_epoch: usize,
    best_dev_accuracy: f64,
    train_size: usize,
    dev_size: usize,
    curve: &'a [EpochStats],
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport, rec: &mut Recorder) -> anyhow::Result<()> {
    write_json(&dir.join(format!("{stem}.json")), report, rec)?;
    write_text(&dir.join(format!("{stem}.txt")), &report.table(), rec)
}

pub fn train_reader(a: &TrainReaderArgs, m: &ArgMatches) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let mut cfg = reader_config(&file, &a.flags, Some(a.hops), &a.common, m)?;
    if let Some(k) = a.cv_folds {
        cfg.cv_folds = Some(k);
        cfg.validate().map_err(|e| input_error(e.to_string()))?;
    }
    prepare_dir(&a.out, a.common.force)?;
    let mut rec = Recorder::new("train-reader", cfg.seed, &cfg)?;
    let mut inputs_cfg = cfg.clone();
    let inputs = ReaderInputs::load(&a.data, &mut rec)?;
    inputs.match_knowledge_dim(&mut inputs_cfg, config::given(m, "knowledge_dim"))?;
    let cfg = inputs_cfg;
    rec.set_config(&cfg)?;
    if cfg.cv_folds.is_some() {
        return run_cv(&inputs, &cfg, &a.out, rec);
    }
    let (train_set, dev_set) = inputs.split(a.dev_count)?;
    let outcome = train(train_set, dev_set, &inputs.kb, inputs.knowledge(), &cfg)?;
    let ckpt = a.out.join("model.json");
    outcome.model.save(&ckpt)?;
    rec.output(&ckpt);
    for (name, set) in [("train.json", train_set), ("dev.json", dev_set)] {
        let p = a.out.join(name);
        save_samples(set, &p)?;
        rec.output(&p);
    }
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        best_dev_accuracy: outcome.best_dev_accuracy,
        train_size: train_set.len(),
        dev_size: dev_set.len(),
        curve: &outcome.curve,
    };
    write_json(&a.out.join("curve.json"), &summary, &mut rec)?;
    let train_report = evaluate(&outcome.model, train_set, &inputs.kb)?;
    write_report(&a.out, "train_report", &train_report, &mut rec)?;
    if !dev_set.is_empty() {
        let dev_report = evaluate(&outcome.model, dev_set, &inputs.kb)?;
        write_report(&a.out, "dev_report", &dev_report, &mut rec)?;
    }
    rec.finish(manifest_path(&a.out, true))?;
    println!(
        "best epoch {}: train accuracy {:.4}, dev accuracy {:.4} ({} train / {} dev)",
        outcome.best_epoch,
        train_report.accuracy,
        outcome.best_dev_accuracy,
        train_set.len(),
        dev_set.len()
    );
    Ok(())
}

pub fn eval_reader(a: &EvalReaderArgs, _m: &ArgMatches) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = config::resolve_seed(a.common.seed, file.seed)?;
    prepare_dir(&a.out, a.common.force)?;
    let mut rec = Recorder::new("eval-reader", seed, &serde_json::json!({ "ckpt": a.ckpt }))?;
    let samples = load_sample_file(&a.samples, &mut rec)?;
    let kb = load_kb(&a.kb, &mut rec)?;
    let model = Model::load(&a.ckpt, None).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    rec.input(&a.ckpt)?;
    let report = evaluate(&model, &samples, &kb)?;
    write_report(&a.out, "report", &report, &mut rec)?;
    rec.finish(manifest_path(&a.out, true))?;
    print!("{}", report.table());
    println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.total);
    Ok(())
}

pub fn sweep(a: &SweepArgs, m: &ArgMatches) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let cfg = reader_config(&file, &a.flags, None, &a.common, m)?;
    if a.hops.is_empty() || a.hops.contains(&0) {
        return Err(input_error("hop counts must be positive"));
    }
    prepare_dir(&a.out, a.common.force)?;
    let mut rec = Recorder::new("sweep", cfg.seed, &serde_json::json!({ "train": cfg, "hops": a.hops }))?;
    let mut inputs_cfg = cfg.clone();
    let inputs = ReaderInputs::load(&a.data, &mut rec)?;
    inputs.match_knowledge_dim(&mut inputs_cfg, config::given(m, "knowledge_dim"))?;
    let cfg = inputs_cfg;
    rec.set_config(&serde_json::json!({ "train": cfg, "hops": a.hops }))?;
    let (train_set, dev_set) = inputs.split(a.dev_count)?;
    let rows = hop_sweep(train_set, dev_set, &inputs.kb, inputs.knowledge(), &cfg, &a.hops)?;
    write_json(&a.out.join("sweep.json"), &rows, &mut rec)?;
    let table = sweep_table(&rows);
    write_text(&a.out.join("sweep.txt"), &table, &mut rec)?;
    rec.finish(manifest_path(&a.out, true))?;
    print!("{table}");
    Ok(())
}

pub fn ablate(a: &AblateArgs, m: &ArgMatches) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let cfg = reader_config(&file, &a.flags, Some(a.hops), &a.common, m)?;
    let mut arms = vec![Ablation::default()];
    if a.arms.is_empty() {
        for flag in Ablation::FLAGS {
            arms.push(Ablation::from_flags(&[flag])?);
        }
    } else {
        for arm in &a.arms {
            arms.push(config::parse_arm(arm)?);
        }
    }
    prepare_dir(&a.out, a.common.force)?;
    let tags: Vec<String> = arms.iter().map(Ablation::tag).collect();
    let mut rec = Recorder::new("ablate", cfg.seed, &serde_json::json!({ "train": cfg, "arms": tags }))?;
    let mut inputs_cfg = cfg.clone();
    let inputs = ReaderInputs::load(&a.data, &mut rec)?;
    inputs.match_knowledge_dim(&mut inputs_cfg, config::given(m, "knowledge_dim"))?;
    let cfg = inputs_cfg;
    rec.set_config(&serde_json::json!({ "train": cfg, "arms": tags }))?;
    let (train_set, dev_set) = inputs.split(a.dev_count)?;
    let rows = run_ablation(train_set, dev_set, &inputs.kb, inputs.knowledge(), &cfg, &arms)?;
    write_json(&a.out.join("ablation.json"), &rows, &mut rec)?;
    let table = ablation_table(&rows);
    write_text(&a.out.join("ablation.txt"), &table, &mut rec)?;
    rec.finish(manifest_path(&a.out, true))?;
    print!("{table}");
    Ok(())
}

pub fn cv(a: &CvArgs, m: &ArgMatches) -> anyhow::Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let mut cfg = reader_config(&file, &a.flags, Some(a.hops), &a.common, m)?;
    cfg.cv_folds = Some(a.folds);
    cfg.validate().map_err(|e| input_error(e.to_string()))?;
    prepare_dir(&a.out, a.common.force)?;
    let mut rec = Recorder::new("cv", cfg.seed, &cfg)?;
    let mut inputs_cfg = cfg.clone();
    let inputs = ReaderInputs::load(&a.data, &mut rec)?;
    inputs.match_knowledge_dim(&mut inputs_cfg, config::given(m, "knowledge_dim"))?;
    let cfg = inputs_cfg;
    rec.set_config(&cfg)?;
    run_cv(&inputs, &cfg, &a.out, rec)
}

#[derive(Serialize)]
struct CvSummary<'a> {
    folds: &'a [FoldResult],
    mean_accuracy: f64,
    kept: &'a [usize],
}

fn run_cv(inputs: &ReaderInputs, cfg: &TrainConfig, out: &Path, mut rec: Recorder) -> anyhow::Result<()> {
    let k = cfg.cv_folds.unwrap_or(0);
    if inputs.samples.len() < k {
        return Err(input_error(format!("{} samples cannot fill {k} folds", inputs.samples.len())));
    }
    let outcome = cross_validate(&inputs.samples, &inputs.kb, inputs.knowledge(), cfg)?;
    let summary = CvSummary {
        folds: &outcome.folds,
        mean_accuracy: outcome.mean_accuracy,
        kept: &outcome.kept,
    };
    write_json(&out.join("cv.json"), &summary, &mut rec)?;
    for &f in &outcome.kept {
        let p = out.join(format!("fold_{f}.json"));
        outcome.models[f].save(&p)?;
        rec.output(&p);
    }
    let mut rows: Vec<Vec<String>> = outcome
        .folds
        .iter()
        .map(|f| {
            vec![
                f.fold.to_string(),
                f.train_size.to_string(),
                f.eval_size.to_string(),
                f.best_epoch.to_string(),
                format!("{:.4}", f.accuracy),
            ]
        })
        .collect();
    rows.push(vec!["mean".into(), String::new(), String::new(), String::new(), format!("{:.4}", outcome.mean_accuracy)]);
    let table = text_table(&["fold", "train", "eval", "best_epoch", "accuracy"], &rows);
    write_text(&out.join("cv.txt"), &table, &mut rec)?;
    rec.finish(manifest_path(out, true))?;
    print!("{table}");
    Ok(())
}
