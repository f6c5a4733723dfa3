//! Reader training with early stopping, evaluation reports, k-fold cross
//! validation, hop sweeps and ablation runs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, OptimConfig, Optimizer};
use crate::corpus::{EntityCatalog, Sample};
use crate::error::{Error, Result};
use crate::gat::argmax;
use crate::kb::KnowledgeBase;
use crate::kg_embed::EmbeddingTable;
use crate::model::{Ablation, Model, ModelConfig, Prepared};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
    pub seed: u64,
    /// Epochs without a dev improvement before stopping.
    pub patience: usize,
    pub clip_norm: Option<f64>,
    /// `Some(k)` selects k-fold cross validation instead of a plain run.
    pub cv_folds: Option<usize>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            optimizer: OptimConfig::adam(1e-3),
            seed: 7,
            patience: 2,
            clip_norm: Some(5.0),
            cv_folds: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Contract("epochs and batch size must be positive".into()));
        }
        if let Some(k) = self.cv_folds {
            if k < 2 {
                return Err(Error::Contract(format!("cross validation needs at least 2 folds, got {k}")));
            }
        }
        self.model.validate()
    }

    pub fn with_hops(&self, hops: usize) -> Self {
        let mut c = self.clone();
        c.model.gat.hops = hops;
        c
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        let mut c = self.clone();
        c.model.ablation = ablation;
        c
    }
}

/// Pretrained knowledge tables handed to the reader.
#[derive(Clone, Copy, Debug, Default)]
pub struct Knowledge<'a> {
    pub transe: Option<&'a EmbeddingTable>,
    pub transh: Option<&'a EmbeddingTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_accuracy: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub model: Model,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted: String,
    pub gold: Option<String>,
    pub correct: bool,
    /// 1-based rank of the gold answer under the tie rule; `None` when the
    /// gold answer is absent or was truncated away.
    pub gold_rank: Option<usize>,
    pub scores: Vec<f64>,
    pub n_docs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocBucket {
    pub label: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    /// Samples with a gold answer.
    pub total: usize,
    pub predictions: Vec<Prediction>,
    /// Grouped by support-document count: 1-9, 10-19, ...
    pub doc_buckets: Vec<DocBucket>,
    /// `gold_rank_counts[r]` samples had the gold answer at rank `r + 1`.
    pub gold_rank_counts: Vec<usize>,
    pub gold_missing: usize,
}

/// Rank of `gold` when sorting by score descending, lower index first on
/// ties.
pub fn gold_rank(scores: &[f64], gold: usize) -> usize {
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > scores[gold] || (s == scores[gold] && i < gold))
        .count()
}

fn bucket_label(n_docs: usize) -> String {
    let b = n_docs / 10;
    format!("{}-{}", (b * 10).max(1), b * 10 + 9)
}

impl EvalReport {
    pub fn from_predictions(predictions: Vec<Prediction>) -> Self {
        let answered: Vec<&Prediction> = predictions.iter().filter(|p| p.gold.is_some()).collect();
        let total = answered.len();
        let correct = answered.iter().filter(|p| p.correct).count();
        let mut buckets: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
        let mut ranks = Vec::new();
        let mut missing = 0;
        for p in &answered {
            let e = buckets.entry(p.n_docs / 10).or_default();
            e.0 += 1;
            e.1 += p.correct as usize;
            match p.gold_rank {
                Some(r) => {
                    if ranks.len() < r {
                        ranks.resize(r, 0);
                    }
                    ranks[r - 1] += 1;
                }
                None => missing += 1,
            }
        }
        let doc_buckets = buckets
            .into_iter()
            .map(|(b, (t, c))| DocBucket {
                label: bucket_label(b * 10),
                total: t,
                correct: c,
                accuracy: c as f64 / t as f64,
            })
            .collect();
        Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            correct,
            total,
            predictions,
            doc_buckets,
            gold_rank_counts: ranks,
            gold_missing: missing,
        }
    }

    pub fn table(&self) -> String {
        let mut rows = vec![vec!["overall".to_string(), self.total.to_string(), self.correct.to_string(), format!("{:.4}", self.accuracy)]];
        for b in &self.doc_buckets {
            rows.push(vec![format!("docs {}", b.label), b.total.to_string(), b.correct.to_string(), format!("{:.4}", b.accuracy)]);
        }
        text_table(&["group", "total", "correct", "accuracy"], &rows)
    }
}

/// Aligned-column plain-text table.
pub fn text_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:<w$}", w = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(|s| s.as_str()).collect()));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
        out.push('\n');
    }
    out
}

fn predict(model: &Model, p: &Prepared, sample: &Sample) -> Result<Prediction> {
    let scores = model.scores(p)?;
    let best = argmax(&scores).ok_or_else(|| Error::Contract(format!("sample {} has no candidates", p.id)))?;
    let gold_rank = p.target.map(|t| gold_rank(&scores, t));
    Ok(Prediction {
        id: p.id.clone(),
        predicted: p.graph.candidates[best].accession.clone(),
        gold: sample.answer.as_ref().map(|a| a.accession.clone()),
        correct: p.target == Some(best),
        gold_rank,
        scores,
        n_docs: p.n_docs,
    })
}

fn prepare_all(model: &Model, samples: &[Sample], kb: &KnowledgeBase, catalog: &EntityCatalog, training: bool) -> Result<Vec<Prepared>> {
    samples
        .par_iter()
        .map(|s| model.prepare(s, kb, catalog, training))
        .collect()
}

fn evaluate_prepared(model: &Model, prepared: &[Prepared], samples: &[Sample]) -> Result<EvalReport> {
    let preds: Result<Vec<Prediction>> = prepared
        .par_iter()
        .zip(samples.par_iter())
        .map(|(p, s)| predict(model, p, s))
        .collect();
    Ok(EvalReport::from_predictions(preds?))
}

/// Argmax predictions with the lowest-index tie rule. Gold answers lost to
/// candidate truncation count as wrong.
pub fn evaluate(model: &Model, samples: &[Sample], kb: &KnowledgeBase) -> Result<EvalReport> {
    model.check_dims()?;
    let catalog = EntityCatalog::build(kb, samples);
    let prepared = prepare_all(model, samples, kb, &catalog, false)?;
    evaluate_prepared(model, &prepared, samples)
}

/// Summed, then averaged, gradients over a batch; summation runs in batch
/// order so results do not depend on thread scheduling.
fn batch_gradients(model: &Model, batch: &[&Prepared]) -> Result<(f64, Gradients)> {
    let parts: Result<Vec<(f64, Gradients)>> = batch.par_iter().map(|p| model.loss_and_grads(p)).collect();
    let mut total = Gradients::new();
    let mut loss = 0.0;
    for (l, g) in parts? {
        loss += l;
        total.accumulate(g);
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((loss, total))
}

/// Trains on `train` and keeps the parameters of the best `dev` epoch
/// (the last epoch when `dev` is empty).
pub fn train(
    train: &[Sample],
    dev: &[Sample],
    kb: &KnowledgeBase,
    knowledge: Knowledge<'_>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some(s) = train.iter().find(|s| s.answer.is_none()) {
        return Err(Error::Validation {
            id: s.id.clone(),
            msg: "training samples need an answer".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let all: Vec<Sample> = train.iter().chain(dev).cloned().collect();
    let mut model = Model::init(config.model.clone(), &all, kb, knowledge.transe, knowledge.transh, &mut rng)?;
    let catalog = EntityCatalog::build(kb, &all);
    let train_p: Vec<Prepared> = prepare_all(&model, train, kb, &catalog, true)?
        .into_iter()
        .filter(|p| p.target.is_some())
        .collect();
    let dev_p = prepare_all(&model, dev, kb, &catalog, false)?;

    let mut optim = Optimizer::new(config.optimizer);
    let mut order: Vec<usize> = (0..train_p.len()).collect();
    let mut curve = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_p[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, &batch)?;
            if let Some(c) = config.clip_norm {
                grads.clip_norm(c);
            }
            optim.step_all(&mut model.store, &grads)?;
            loss_sum += loss;
        }
        let mean_loss = loss_sum / train_p.len().max(1) as f64;
        let dev_accuracy = if dev_p.is_empty() {
            0.0
        } else {
            evaluate_prepared(&model, &dev_p, dev)?.accuracy
        };
        let improved = match &best {
            None => true,
            Some((_, _, acc)) => dev_accuracy > *acc || dev_p.is_empty(),
        };
        log::info!("epoch {epoch}: loss {mean_loss:.4}, dev accuracy {dev_accuracy:.4}");
        curve.push(EpochStats {
            epoch,
            mean_loss,
            dev_accuracy,
            improved,
        });
        if improved {
            best = Some((model.clone(), epoch, dev_accuracy));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (model, best_epoch, best_dev_accuracy) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        curve,
        best_epoch,
        best_dev_accuracy,
    })
}

/// Fold index per pool position: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 || folds > n {
        return Err(Error::Contract(format!("cannot split {n} samples into {folds} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        out[i] = pos % folds;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub best_epoch: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    /// Folds whose checkpoints are kept: the three most accurate.
    pub kept: Vec<usize>,
    pub models: Vec<Model>,
}

/// Each fold trains on the other folds with its own held-out part as the
/// early-stopping set.
pub fn cross_validate(pool: &[Sample], kb: &KnowledgeBase, knowledge: Knowledge<'_>, config: &TrainConfig) -> Result<CvOutcome> {
    let k = config
        .cv_folds
        .ok_or_else(|| Error::Contract("cross validation needs cv_folds".into()))?;
    let assign = fold_assignment(pool.len(), k, config.seed)?;
    let mut folds = Vec::with_capacity(k);
    let mut models = Vec::with_capacity(k);
    for f in 0..k {
        let (held, rest): (Vec<_>, Vec<_>) = pool.iter().zip(&assign).partition(|(_, &a)| a == f);
        let held: Vec<Sample> = held.into_iter().map(|(s, _)| s.clone()).collect();
        let rest: Vec<Sample> = rest.into_iter().map(|(s, _)| s.clone()).collect();
        let mut fold_config = config.clone();
        fold_config.cv_folds = None;
        let out = train(&rest, &held, kb, knowledge, &fold_config)?;
        folds.push(FoldResult {
            fold: f,
            train_size: rest.len(),
            eval_size: held.len(),
            best_epoch: out.best_epoch,
            accuracy: out.best_dev_accuracy,
        });
        models.push(out.model);
    }
    let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / k as f64;
    let mut ranked: Vec<usize> = (0..k).collect();
    ranked.sort_by(|&a, &b| folds[b].accuracy.total_cmp(&folds[a].accuracy).then(a.cmp(&b)));
    ranked.truncate(3);
    Ok(CvOutcome {
        folds,
        mean_accuracy,
        kept: ranked,
        models,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub hops: usize,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
}

/// Retrains once per hop count with the same seed.
pub fn hop_sweep(
    train_set: &[Sample],
    dev: &[Sample],
    kb: &KnowledgeBase,
    knowledge: Knowledge<'_>,
    config: &TrainConfig,
    hops: &[usize],
) -> Result<Vec<SweepRow>> {
    hops.iter()
        .map(|&h| {
            if h == 0 {
                return Err(Error::Contract("hop counts must be at least 1".into()));
            }
            let out = train(train_set, dev, kb, knowledge, &config.with_hops(h))?;
            Ok(SweepRow {
                hops: h,
                best_epoch: out.best_epoch,
                dev_accuracy: out.best_dev_accuracy,
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.hops.to_string(), r.best_epoch.to_string(), format!("{:.4}", r.dev_accuracy)])
        .collect();
    text_table(&["hops", "best_epoch", "dev_accuracy"], &body)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub dev_accuracy: f64,
    /// Accuracy minus the first arm's.
    pub delta: f64,
}

/// One training run per arm; the first arm is the reference for deltas.
pub fn ablate(
    train_set: &[Sample],
    dev: &[Sample],
    kb: &KnowledgeBase,
    knowledge: Knowledge<'_>,
    config: &TrainConfig,
    arms: &[Ablation],
) -> Result<Vec<AblationRow>> {
    for a in arms {
        a.validate()?;
    }
    let mut rows: Vec<AblationRow> = Vec::with_capacity(arms.len());
    for a in arms {
        let out = train(train_set, dev, kb, knowledge, &config.with_ablation(a.clone()))?;
        let base = rows.first().map_or(out.best_dev_accuracy, |r| r.dev_accuracy);
        rows.push(AblationRow {
            arm: a.tag(),
            dev_accuracy: out.best_dev_accuracy,
            delta: out.best_dev_accuracy - base,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.arm.clone(), format!("{:.4}", r.dev_accuracy), format!("{:+.4}", r.delta)])
        .collect();
    text_table(&["arm", "dev_accuracy", "delta"], &body)
}
