//! Translational knowledge-graph embeddings (TransE, TransH) trained with a
//! margin ranking loss, plus link-prediction evaluation.
//!
//! A triplet `(p, ℓ, d)` is scored by a distance, lower meaning more
//! plausible:
//!
//! * TransE: `‖p + ℓ − d‖₂`
//! * TransH: `‖p⊥ + ℓ − d⊥‖₂` where `x⊥ = x − (wᵀx)w` projects onto the
//!   relation's hyperplane with unit normal `w`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimConfig, Optimizer, OptimizerKind, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::kb::{ActionLabel, EntityId, EntityKind, KnowledgeBase, Triplet};

const FORMAT_TAG: &str = "medkg-emb";
const FORMAT_VERSION: &str = "v1";
const NORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransModel {
    TransE,
    TransH,
}

impl TransModel {
    pub fn as_str(self) -> &'static str {
        match self {
            TransModel::TransE => "transe",
            TransModel::TransH => "transh",
        }
    }
}

impl std::str::FromStr for TransModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(TransModel::TransE),
            "transh" => Ok(TransModel::TransH),
            other => Err(Error::Format(format!("unknown embedding model {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransConfig {
    pub model: TransModel,
    pub margin: f64,
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TransConfig {
    fn default() -> Self {
        Self {
            model: TransModel::TransE,
            margin: 1.0,
            dim: 200,
            epochs: 1000,
            negatives: 1,
            lr: 0.01,
            batch_size: 128,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TransConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(contract("margin must be positive"));
        }
        if self.epochs == 0 || self.dim == 0 || self.negatives == 0 || self.batch_size == 0 {
            return Err(contract("epochs, dim, negatives and batch size must be at least 1"));
        }
        if self.lr < 0.0 {
            return Err(contract("learning rate must be non-negative"));
        }
        Ok(())
    }
}

/// Trained vectors for every entity and relation of a knowledge base.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub model: TransModel,
    pub dim: usize,
    pub entities: BTreeMap<EntityId, Vec<f64>>,
    pub relations: BTreeMap<ActionLabel, Vec<f64>>,
    /// Hyperplane normals; TransH only.
    pub normals: BTreeMap<ActionLabel, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPredictionReport {
    pub mrr: f64,
    pub mr: f64,
    pub hits_at_10: f64,
    pub hits_at_3: f64,
    pub hits_at_1: f64,
    pub filtered: bool,
    /// Number of ranks averaged (two per evaluated triplet).
    pub queries: usize,
}

/// Which endpoint a negative sample replaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptedSide {
    Head,
    Tail,
}

fn check_dims(op: &'static str, parts: &[&[f64]]) -> Result<usize> {
    let n = parts[0].len();
    for p in &parts[1..] {
        if p.len() != n {
            return Err(Error::Shape {
                op,
                lhs: vec![n],
                rhs: vec![p.len()],
            });
        }
    }
    Ok(n)
}

/// `‖p + ℓ − d‖₂`.
pub fn score_transe(p: &[f64], l: &[f64], d: &[f64]) -> Result<f64> {
    check_dims("score_transe", &[p, l, d])?;
    Ok(p.iter()
        .zip(l)
        .zip(d)
        .map(|((a, b), c)| {
            let x = a + b - c;
            x * x
        })
        .sum::<f64>()
        .sqrt())
}

/// Distance between the hyperplane projections of `p + ℓ` and `d`; `w`
/// must have unit norm.
pub fn score_transh(p: &[f64], l: &[f64], d: &[f64], w: &[f64]) -> Result<f64> {
    check_dims("score_transh", &[p, l, d, w])?;
    let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (wn - 1.0).abs() > NORMAL_TOL {
        return Err(contract(format!("hyperplane normal has norm {wn}, expected 1")));
    }
    let wp: f64 = w.iter().zip(p).map(|(a, b)| a * b).sum();
    let wd: f64 = w.iter().zip(d).map(|(a, b)| a * b).sum();
    Ok((0..p.len())
        .map(|i| {
            let x = (p[i] - wp * w[i]) + l[i] - (d[i] - wd * w[i]);
            x * x
        })
        .sum::<f64>()
        .sqrt())
}

/// Uniform corruption of one endpoint, avoiding known true triplets.
pub struct Corruptor {
    proteins: Vec<EntityId>,
    drugs: Vec<EntityId>,
    truth: HashSet<Triplet>,
    pub max_retries: usize,
}

impl Corruptor {
    pub fn new(kb: &KnowledgeBase) -> Result<Self> {
        Self::from_catalog(
            kb.proteins().into_iter().collect(),
            kb.drugs().into_iter().collect(),
            kb.triplets().iter().cloned(),
        )
    }

    pub fn from_catalog(
        proteins: Vec<EntityId>,
        drugs: Vec<EntityId>,
        truth: impl IntoIterator<Item = Triplet>,
    ) -> Result<Self> {
        if proteins.len() < 2 || drugs.len() < 2 {
            return Err(contract(format!(
                "negative sampling needs at least 2 proteins and 2 drugs, have {} and {}",
                proteins.len(),
                drugs.len()
            )));
        }
        Ok(Self {
            proteins,
            drugs,
            truth: truth.into_iter().collect(),
            max_retries: 100,
        })
    }

    /// Replaces the head (with a random protein) or the tail (with a random
    /// drug) on a fair coin flip. The relation is never changed.
    pub fn negative_sample<R: Rng + ?Sized>(&self, t: &Triplet, rng: &mut R) -> Result<(Triplet, CorruptedSide)> {
        for _ in 0..self.max_retries {
            let mut neg = t.clone();
            let side = if rng.random_bool(0.5) {
                neg.protein = pick_other(&self.proteins, &t.protein, rng);
                CorruptedSide::Head
            } else {
                neg.drug = pick_other(&self.drugs, &t.drug, rng);
                CorruptedSide::Tail
            };
            if !self.truth.contains(&neg) {
                return Ok((neg, side));
            }
        }
        Err(Error::Infeasible(format!(
            "no negative for {} {} {} after {} retries; knowledge base too dense",
            t.protein, t.action, t.drug, self.max_retries
        )))
    }
}

fn pick_other<R: Rng + ?Sized>(pool: &[EntityId], current: &EntityId, rng: &mut R) -> EntityId {
    loop {
        let c = &pool[rng.random_range(0..pool.len())];
        if c != current {
            return c.clone();
        }
    }
}

struct TrainIds {
    entities: BTreeMap<EntityId, ParamId>,
    relations: BTreeMap<ActionLabel, ParamId>,
    normals: BTreeMap<ActionLabel, ParamId>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn clamp_norm(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn project<'t>(x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let along = x.matmul(w.transpose()?)?;
    x.sub(along.mul(w)?)
}

fn tape_score<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    ids: &TrainIds,
    model: TransModel,
    t: &Triplet,
) -> Result<Var<'t>> {
    let p = tape.param(store, ids.entities[&t.protein]);
    let d = tape.param(store, ids.entities[&t.drug]);
    let l = tape.param(store, ids.relations[&t.action]);
    let diff = match model {
        TransModel::TransE => p.add(l)?.sub(d)?,
        TransModel::TransH => {
            let w = tape.param(store, ids.normals[&t.action]);
            project(p, w)?.add(l)?.sub(project(d, w)?)?
        }
    };
    Ok(diff.l2_norm())
}

/// `[γ + s(pos) − s(neg)]₊` for already computed scores.
pub fn hinge(margin: f64, pos: f64, neg: f64) -> f64 {
    (margin + pos - neg).max(0.0)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub table: EmbeddingTable,
    /// Summed hinge loss for each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minimizes the margin ranking loss over `triplets` with minibatch
/// gradient descent. Entities of `kb` that appear in no training triplet
/// keep their initial vectors.
pub fn train_embeddings<R: Rng + ?Sized>(
    kb: &KnowledgeBase,
    triplets: &[Triplet],
    config: &TransConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(contract("cannot train embeddings on an empty knowledge base"));
    }
    let corruptor = Corruptor::new(kb)?;
    let dim = config.dim;
    let bound = 6.0 / (dim as f64).sqrt();

    let mut store = ParamStore::new();
    let mut ids = TrainIds {
        entities: BTreeMap::new(),
        relations: BTreeMap::new(),
        normals: BTreeMap::new(),
    };
    for e in kb.proteins().into_iter().chain(kb.drugs()) {
        let mut v = Tensor::uniform(&[1, dim], bound, rng);
        normalize(v.data_mut());
        let name = format!("e:{:?}:{}", e.kind, e.accession);
        ids.entities.insert(e, store.add(name, v));
    }
    for a in kb.actions() {
        let mut v = Tensor::uniform(&[1, dim], bound, rng);
        normalize(v.data_mut());
        ids.relations.insert(a.clone(), store.add(format!("r:{a}"), v));
        if config.model == TransModel::TransH {
            let mut w = Tensor::uniform(&[1, dim], bound, rng);
            normalize(w.data_mut());
            ids.normals.insert(a.clone(), store.add(format!("w:{a}"), w));
        }
    }

    let optim_cfg = match config.optimizer {
        OptimizerKind::Sgd => OptimConfig::sgd(config.lr),
        OptimizerKind::Adam => OptimConfig::adam(config.lr),
    };
    let mut optimizer = Optimizer::new(optim_cfg);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut pairs = Vec::with_capacity(batch.len() * config.negatives);
            for &i in batch {
                for _ in 0..config.negatives {
                    let (neg, _) = corruptor.negative_sample(&triplets[i], rng)?;
                    pairs.push((&triplets[i], neg));
                }
            }
            let tape = Tape::new();
            let margin = tape.constant(Tensor::scalar(config.margin));
            let mut terms = Vec::with_capacity(pairs.len());
            for (pos, neg) in &pairs {
                let sp = tape_score(&tape, &store, &ids, config.model, pos)?;
                let sn = tape_score(&tape, &store, &ids, config.model, neg)?;
                terms.push(margin.add(sp)?.sub(sn)?.leaky_relu(0.0));
            }
            let loss = Var::concat(&terms, 0)?.sum();
            epoch_loss += loss.value().item();
            let grads = tape.backward(loss)?;
            optimizer.step_all(&mut store, &grads)?;
            if config.model == TransModel::TransH {
                for &id in ids.normals.values() {
                    normalize(store.get_mut(id).data_mut());
                }
            }
        }
        match config.model {
            TransModel::TransE => {
                for &id in ids.entities.values() {
                    normalize(store.get_mut(id).data_mut());
                }
            }
            TransModel::TransH => {
                for &id in ids.entities.values() {
                    clamp_norm(store.get_mut(id).data_mut());
                }
            }
        }
        epoch_losses.push(epoch_loss);
    }

    let grab = |id: &ParamId| store.get(*id).data().to_vec();
    let table = EmbeddingTable {
        model: config.model,
        dim,
        entities: ids.entities.iter().map(|(k, v)| (k.clone(), grab(v))).collect(),
        relations: ids.relations.iter().map(|(k, v)| (k.clone(), grab(v))).collect(),
        normals: ids.normals.iter().map(|(k, v)| (k.clone(), grab(v))).collect(),
    };
    Ok(TrainOutcome {
        table,
        epoch_losses,
    })
}

/// Splits triplets into train and test sets for the proper-split
/// evaluation mode.
pub fn split_triplets<R: Rng + ?Sized>(kb: &KnowledgeBase, test_fraction: f64, rng: &mut R) -> (Vec<Triplet>, Vec<Triplet>) {
    let mut all: Vec<Triplet> = kb.triplets().iter().cloned().collect();
    all.shuffle(rng);
    let n_test = ((all.len() as f64) * test_fraction).round() as usize;
    let test = all.split_off(all.len() - n_test.min(all.len()));
    (all, test)
}

impl EmbeddingTable {
    pub fn score(&self, t: &Triplet) -> Result<f64> {
        let get = |e: &EntityId| {
            self.entities
                .get(e)
                .ok_or_else(|| Error::MissingEntities(vec![e.accession.clone()]))
        };
        let p = get(&t.protein)?;
        let d = get(&t.drug)?;
        let l = self
            .relations
            .get(&t.action)
            .ok_or_else(|| Error::MissingEntities(vec![t.action.0.clone()]))?;
        match self.model {
            TransModel::TransE => score_transe(p, l, d),
            TransModel::TransH => {
                let w = self
                    .normals
                    .get(&t.action)
                    .ok_or_else(|| Error::MissingEntities(vec![t.action.0.clone()]))?;
                score_transh(p, l, d, w)
            }
        }
    }

    pub fn entities_of(&self, kind: EntityKind) -> Vec<&EntityId> {
        self.entities.keys().filter(|e| e.kind == kind).collect()
    }

    /// Writes the versioned text format with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{FORMAT_TAG} {FORMAT_VERSION} model={} dim={} entities={} relations={}\n",
            self.model.as_str(),
            self.dim,
            self.entities.len(),
            self.relations.len()
        );
        let mut line = |tag: &str, id: &str, v: &[f64]| {
            let _ = write!(out, "{tag}:{id}\t");
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{x:.16e}");
            }
            out.push('\n');
        };
        for (e, v) in &self.entities {
            let tag = match e.kind {
                EntityKind::Drug => "drug",
                EntityKind::Protein => "protein",
            };
            line(tag, &e.accession, v);
        }
        for (r, v) in &self.relations {
            line("relation", &r.0, v);
        }
        for (r, v) in &self.normals {
            line("normal", &r.0, v);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty embedding file".into()))?;
        // The writer ends every line with a newline; a missing one means the
        // file was cut mid-line, possibly inside a number.
        if !text.ends_with('\n') {
            return Err(Error::Format("embedding file truncated mid-line".into()));
        }
        let mut fields = header.split_whitespace();
        if fields.next() != Some(FORMAT_TAG) {
            return Err(Error::Format("not an embedding file".into()));
        }
        match fields.next() {
            Some(FORMAT_VERSION) => {}
            other => {
                return Err(Error::Format(format!(
                    "unsupported embedding file version {other:?}, expected {FORMAT_VERSION}"
                )))
            }
        }
        let mut kv = BTreeMap::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {f}")))?;
            kv.insert(k, v);
        }
        let need = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("header missing {k}")))
        };
        let model: TransModel = need("model")?.parse()?;
        let num = |k: &str| -> Result<usize> {
            need(k)?
                .parse()
                .map_err(|_| Error::Format(format!("header field {k} is not a number")))
        };
        let (dim, n_ent, n_rel) = (num("dim")?, num("entities")?, num("relations")?);
        let n_norm = if model == TransModel::TransH { n_rel } else { 0 };

        let mut table = EmbeddingTable {
            model,
            dim,
            entities: BTreeMap::new(),
            relations: BTreeMap::new(),
            normals: BTreeMap::new(),
        };
        let mut seen = 0usize;
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let line_no = i + 2;
            let (id, vals) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {line_no}: missing tab")))?;
            let v = vals
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Format(format!("line {line_no}: {e}")))?;
            if v.len() != dim {
                return Err(Error::Format(format!(
                    "line {line_no}: {} values but header dim={dim}",
                    v.len()
                )));
            }
            let (tag, name) = id
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("line {line_no}: id without kind tag")))?;
            match tag {
                "drug" => table.entities.insert(EntityId::drug(name), v),
                "protein" => table.entities.insert(EntityId::protein(name), v),
                "relation" => table.relations.insert(ActionLabel::new(name), v),
                "normal" => table.normals.insert(ActionLabel::new(name), v),
                other => return Err(Error::Format(format!("line {line_no}: unknown tag {other}"))),
            };
            seen += 1;
        }
        if table.entities.len() != n_ent || table.relations.len() != n_rel || table.normals.len() != n_norm {
            return Err(Error::Format(format!(
                "embedding file truncated or inconsistent: header promises {n_ent} entities, \
                 {n_rel} relations; found {} entities, {} relations, {} normals in {seen} lines",
                table.entities.len(),
                table.relations.len(),
                table.normals.len()
            )));
        }
        Ok(table)
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Per-triplet ranks, head direction then tail direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletRanks {
    pub head: usize,
    pub tail: usize,
}

fn rank_among(
    table: &EmbeddingTable,
    truth: &Triplet,
    candidates: &[&EntityId],
    replace: impl Fn(&Triplet, &EntityId) -> Triplet,
    known: Option<&BTreeSet<Triplet>>,
    true_entity: &EntityId,
) -> Result<usize> {
    let s_true = table.score(truth)?;
    let mut rank = 1;
    for &c in candidates {
        if c == true_entity {
            continue;
        }
        let t = replace(truth, c);
        if known.is_some_and(|k| k.contains(&t)) {
            continue;
        }
        // Ties count against the true entity.
        if table.score(&t)? <= s_true {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Ranks of each test triplet's true head among all proteins and true tail
/// among all drugs of the table.
pub fn triplet_ranks(
    table: &EmbeddingTable,
    test: &[Triplet],
    known: &BTreeSet<Triplet>,
    filtered: bool,
) -> Result<Vec<TripletRanks>> {
    let mut missing: BTreeSet<String> = BTreeSet::new();
    for t in test {
        for e in [&t.protein, &t.drug] {
            if !table.entities.contains_key(e) {
                missing.insert(e.accession.clone());
            }
        }
        if !table.relations.contains_key(&t.action) {
            missing.insert(t.action.0.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingEntities(missing.into_iter().collect()));
    }
    let proteins = table.entities_of(EntityKind::Protein);
    let drugs = table.entities_of(EntityKind::Drug);
    let known = filtered.then_some(known);
    test.par_iter()
        .map(|t| {
            let head = rank_among(
                table,
                t,
                &proteins,
                |t, c| Triplet {
                    protein: c.clone(),
                    ..t.clone()
                },
                known,
                &t.protein,
            )?;
            let tail = rank_among(
                table,
                t,
                &drugs,
                |t, c| Triplet {
                    drug: c.clone(),
                    ..t.clone()
                },
                known,
                &t.drug,
            )?;
            Ok(TripletRanks { head, tail })
        })
        .collect()
}

impl LinkPredictionReport {
    pub fn from_ranks(ranks: &[TripletRanks], filtered: bool) -> Self {
        let all: Vec<usize> = ranks.iter().flat_map(|r| [r.head, r.tail]).collect();
        let n = all.len().max(1) as f64;
        let hits = |k: usize| all.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            mrr: all.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            mr: all.iter().map(|&r| r as f64).sum::<f64>() / n,
            hits_at_10: hits(10),
            hits_at_3: hits(3),
            hits_at_1: hits(1),
            filtered,
            queries: all.len(),
        }
    }
}

/// Evaluates on `test`, filtering against `known` when `filtered` is set.
pub fn eval_link_prediction_on(
    table: &EmbeddingTable,
    test: &[Triplet],
    known: &BTreeSet<Triplet>,
    filtered: bool,
) -> Result<LinkPredictionReport> {
    let ranks = triplet_ranks(table, test, known, filtered)?;
    Ok(LinkPredictionReport::from_ranks(&ranks, filtered))
}

/// Shared-set evaluation: every triplet of `kb` is both a training fact and
/// a test query.
pub fn eval_link_prediction(table: &EmbeddingTable, kb: &KnowledgeBase, filtered: bool) -> Result<LinkPredictionReport> {
    let test: Vec<Triplet> = kb.triplets().iter().cloned().collect();
    eval_link_prediction_on(table, &test, kb.triplets(), filtered)
}
