//! Question instances, tokenization, vocabularies and a synthetic corpus
//! generator with planted interaction chains.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kb::{EntityId, EntityKind, KnowledgeBase, PathwayPair, Triplet};

pub const RELATION: &str = "interacts_with";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

pub const SAMPLES_FILE: &str = "samples.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// One question: which candidate drug interacts with `subject`?
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subject: EntityId,
    pub relation: String,
    pub candidates: Vec<EntityId>,
    pub supports: Vec<String>,
    /// Absent for blind evaluation.
    pub answer: Option<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RawSample {
    id: String,
    query: String,
    candidates: Vec<String>,
    supports: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
}

impl Sample {
    pub fn query(&self) -> String {
        format!("{} {}", self.relation, self.subject.accession)
    }

    pub fn answer_index(&self) -> Option<usize> {
        let a = self.answer.as_ref()?;
        self.candidates.iter().position(|c| c == a)
    }

    fn from_raw(raw: RawSample) -> Result<Self> {
        let invalid = |msg: String| Error::Validation {
            id: raw.id.clone(),
            msg,
        };
        let (relation, subject) = raw
            .query
            .split_once(' ')
            .ok_or_else(|| invalid(format!("query {:?} is not '<relation> <drug>'", raw.query)))?;
        if relation != RELATION {
            return Err(invalid(format!("unknown relation {relation}")));
        }
        let subject = subject.trim();
        if subject.is_empty() {
            return Err(invalid("query has no subject drug".into()));
        }
        if raw.candidates.len() < 2 {
            return Err(invalid(format!(
                "{} candidate(s); at least 2 are needed",
                raw.candidates.len()
            )));
        }
        let candidates: Vec<EntityId> = raw.candidates.iter().map(EntityId::drug).collect();
        let answer = raw.answer.as_ref().map(EntityId::drug);
        if let Some(a) = &answer {
            if !candidates.contains(a) {
                return Err(invalid(format!("answer {a} is not among the candidates")));
            }
        }
        Ok(Sample {
            id: raw.id,
            subject: EntityId::drug(subject),
            relation: relation.to_string(),
            candidates,
            supports: raw.supports,
            answer,
        })
    }

    fn to_raw(&self) -> RawSample {
        RawSample {
            id: self.id.clone(),
            query: self.query(),
            candidates: self.candidates.iter().map(|c| c.accession.clone()).collect(),
            supports: self.supports.clone(),
            answer: self.answer.as_ref().map(|a| a.accession.clone()),
        }
    }
}

pub fn parse_samples(json: &str) -> Result<Vec<Sample>> {
    let raw: Vec<RawSample> = serde_json::from_str(json)?;
    raw.into_iter().map(Sample::from_raw).collect()
}

pub fn samples_to_json(samples: &[Sample]) -> Result<String> {
    let raw: Vec<RawSample> = samples.iter().map(Sample::to_raw).collect();
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    parse_samples(&fs::read_to_string(path)?)
}

pub fn save_samples(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, samples_to_json(samples)?)?;
    Ok(())
}

/// Accession lookup used to recognize entity tokens.
#[derive(Clone, Debug, Default)]
pub struct EntityCatalog {
    kinds: HashMap<String, EntityKind>,
}

impl EntityCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every KB entity plus each sample's subject and candidates (as drugs).
    pub fn build(kb: &KnowledgeBase, samples: &[Sample]) -> Self {
        let mut cat = Self::new();
        for p in kb.proteins() {
            cat.insert(&p);
        }
        for d in kb.drugs() {
            cat.insert(&d);
        }
        for s in samples {
            cat.insert(&s.subject);
            for c in &s.candidates {
                cat.insert(c);
            }
        }
        cat
    }

    pub fn insert(&mut self, e: &EntityId) {
        self.kinds.insert(e.accession.clone(), e.kind);
    }

    pub fn lookup(&self, token: &str) -> Option<EntityId> {
        self.kinds.get(token).map(|&kind| EntityId {
            kind,
            accession: token.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity: EntityId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub tokens: Vec<String>,
    pub entity_spans: Vec<EntitySpan>,
}

const LEADING: &[char] = &['(', '[', '{', '"', '\''];
const TRAILING: &[char] = &['.', ',', ';', ':', '!', '?', ')', ']', '}', '"', '\''];

/// Splits on whitespace and detaches leading and trailing punctuation into
/// their own tokens. Tokens found in `catalog` (case-sensitive) become
/// single-token entity spans.
pub fn tokenize(doc: &str, catalog: &EntityCatalog) -> TokenizedDoc {
    let mut tokens = Vec::new();
    for word in doc.split_whitespace() {
        let mut core = word;
        let mut lead = Vec::new();
        while let Some(c) = core.chars().next().filter(|c| LEADING.contains(c)) {
            lead.push(c.to_string());
            core = &core[c.len_utf8()..];
        }
        let mut trail = Vec::new();
        while let Some(c) = core.chars().last().filter(|c| TRAILING.contains(c)) {
            trail.push(c.to_string());
            core = &core[..core.len() - c.len_utf8()];
        }
        tokens.extend(lead);
        if !core.is_empty() {
            tokens.push(core.to_string());
        }
        tokens.extend(trail.into_iter().rev());
    }
    let entity_spans = tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            catalog.lookup(t).map(|entity| EntitySpan {
                start: i,
                end: i + 1,
                entity,
            })
        })
        .collect();
    TokenizedDoc {
        tokens,
        entity_spans,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub dim: usize,
}

impl Vocabulary {
    pub fn new(dim: usize) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            dim,
        };
        v.insert(PAD);
        v.insert(UNK);
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Index of `token`, or [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    /// Hex SHA-256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Indexes every question, support, subject and candidate token, and draws a
/// trainable embedding matrix from `N(0, 0.1²)`.
pub fn build_vocab<R: Rng + ?Sized>(samples: &[Sample], dim: usize, rng: &mut R) -> (Vocabulary, Tensor) {
    let mut vocab = Vocabulary::new(dim);
    let empty = EntityCatalog::new();
    for s in samples {
        for t in tokenize(&s.query(), &empty).tokens {
            vocab.insert(&t);
        }
        vocab.insert(&s.subject.accession);
        for c in &s.candidates {
            vocab.insert(&c.accession);
        }
        for doc in &s.supports {
            for t in tokenize(doc, &empty).tokens {
                vocab.insert(&t);
            }
        }
    }
    let emb = Tensor::randn(&[vocab.len(), dim.max(1)], 0.1, rng);
    (vocab, emb)
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_drugs: usize,
    pub n_proteins: usize,
    /// Inclusive range of chain lengths, counted in links: subject → p₁ → …
    /// → p_k → answer has k + 1 links.
    pub chain_len_min: usize,
    pub chain_len_max: usize,
    pub n_samples: usize,
    pub docs_min: usize,
    pub docs_max: usize,
    pub candidates: usize,
    /// Fraction of support sentences that are off-chain distractors.
    pub distractor_rate: f64,
    pub n_actions: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_drugs: 200,
            n_proteins: 1200,
            chain_len_min: 2,
            chain_len_max: 3,
            n_samples: 250,
            docs_min: 1,
            docs_max: 4,
            candidates: 9,
            distractor_rate: 0.3,
            n_actions: 8,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Infeasible(m.to_string()));
        if self.chain_len_min < 2 || self.chain_len_max < self.chain_len_min {
            return bad("chain lengths must satisfy 2 <= min <= max");
        }
        if self.candidates < 2 {
            return bad("at least 2 candidates are needed");
        }
        if self.n_drugs < self.candidates + 1 {
            return bad("not enough drugs for the subject plus the candidate set");
        }
        if self.n_proteins < self.chain_len_max - 1 {
            return bad("not enough proteins for the longest chain");
        }
        if self.docs_min == 0 || self.docs_max < self.docs_min {
            return bad("document counts must satisfy 1 <= min <= max");
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return bad("distractor rate must be in [0, 1)");
        }
        if self.n_actions == 0 {
            return bad("at least one action label is needed");
        }
        Ok(())
    }
}

/// The planted chain behind one generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: String,
    pub subject: String,
    pub answer: String,
    /// Subject, proteins in order, answer.
    pub chain: Vec<String>,
    pub chain_sentences: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub kb: KnowledgeBase,
    pub samples: Vec<Sample>,
    pub ground_truth: Vec<GroundTruth>,
}

impl SynthCorpus {
    /// Writes samples JSON, both KB TSVs and the ground truth.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let samples = dir.join(SAMPLES_FILE);
        save_samples(&self.samples, &samples)?;
        let (t, p) = self.kb.save_dir(dir)?;
        let gt = dir.join(GROUND_TRUTH_FILE);
        fs::write(&gt, serde_json::to_string_pretty(&self.ground_truth)?)?;
        Ok(vec![samples, t, p, gt])
    }
}

/// Drugs reachable from `subject`: those with a target in the undirected
/// pathway closure of the subject's own targets.
pub fn reachable_drugs(kb: &KnowledgeBase, subject: &EntityId) -> Result<BTreeSet<EntityId>> {
    let mut seen: BTreeSet<EntityId> = kb.targets_of(subject)?;
    let mut queue: VecDeque<EntityId> = seen.iter().cloned().collect();
    while let Some(p) = queue.pop_front() {
        for q in kb.interactors_of(&p, false)? {
            if seen.insert(q.clone()) {
                queue.push_back(q);
            }
        }
    }
    let mut out = BTreeSet::new();
    for t in kb.triplets() {
        if seen.contains(&t.protein) {
            out.insert(t.drug.clone());
        }
    }
    Ok(out)
}

const ACTIONS: &[&str] = &[
    "inhibitor",
    "agonist",
    "antagonist",
    "blocker",
    "activator",
    "substrate",
    "binder",
    "cofactor",
    "inducer",
    "modulator",
    "potentiator",
    "ligand",
];

fn action_name(i: usize) -> String {
    if i < ACTIONS.len() {
        ACTIONS[i].to_string()
    } else {
        format!("action{i}")
    }
}

fn drug_sentence<R: Rng + ?Sized>(drug: &str, action: &str, protein: &str, rng: &mut R) -> String {
    match rng.random_range(0..3) {
        0 => format!("{drug} is a known {action} of {protein} ."),
        1 => format!("{protein} is targeted by {drug} , acting as {action} ."),
        _ => format!("Studies report that {drug} binds {protein} ."),
    }
}

fn pathway_sentence<R: Rng + ?Sized>(a: &str, b: &str, rng: &mut R) -> String {
    match rng.random_range(0..3) {
        0 => format!("{a} interacts with {b} in a signalling pathway ."),
        1 => format!("{b} is regulated by {a} ."),
        _ => format!("The pathway links {a} to {b} ."),
    }
}

/// Builds a random knowledge base with one planted chain per sample and
/// writes the chain's facts as support sentences. Non-answer candidates are
/// drawn from drugs the subject cannot reach in the final knowledge base.
pub fn synth_generate<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<SynthCorpus> {
    spec.validate()?;
    let drugs: Vec<EntityId> = (0..spec.n_drugs).map(|i| EntityId::drug(format!("DB{:05}", i + 1))).collect();
    let proteins: Vec<EntityId> = (0..spec.n_proteins)
        .map(|i| EntityId::protein(format!("P{:05}", 10001 + i)))
        .collect();
    let actions: Vec<String> = (0..spec.n_actions).map(action_name).collect();

    let mut unused: Vec<usize> = (0..proteins.len()).collect();
    unused.shuffle(rng);
    let mut take_protein = |rng: &mut R| -> usize {
        unused
            .pop()
            .unwrap_or_else(|| rng.random_range(0..proteins.len()))
    };

    let mut kb = KnowledgeBase::new();
    let mut act_of: BTreeMap<(String, String), String> = BTreeMap::new();
    let mut add_target = |kb: &mut KnowledgeBase, p: &EntityId, d: &EntityId, rng: &mut R| {
        let action = actions.choose(rng).expect("non-empty").clone();
        act_of
            .entry((p.accession.clone(), d.accession.clone()))
            .or_insert_with(|| action.clone());
        kb.add_triplet(Triplet {
            protein: p.clone(),
            action: crate::kb::ActionLabel(action),
            drug: d.clone(),
        });
    };

    struct Plan {
        subject: usize,
        answer: usize,
        chain: Vec<usize>,
    }
    let mut plans = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let subject = rng.random_range(0..drugs.len());
        let answer = loop {
            let a = rng.random_range(0..drugs.len());
            if a != subject {
                break a;
            }
        };
        let links = rng.random_range(spec.chain_len_min..=spec.chain_len_max);
        let mut chain: Vec<usize> = Vec::with_capacity(links - 1);
        while chain.len() < links - 1 {
            let p = take_protein(rng);
            if !chain.contains(&p) {
                chain.push(p);
            }
        }
        add_target(&mut kb, &proteins[chain[0]], &drugs[subject], rng);
        add_target(&mut kb, &proteins[*chain.last().unwrap()], &drugs[answer], rng);
        for w in chain.windows(2) {
            kb.add_pathway(PathwayPair {
                from: proteins[w[0]].clone(),
                to: proteins[w[1]].clone(),
            });
        }
        plans.push(Plan {
            subject,
            answer,
            chain,
        });
    }
    // Every drug gets one background target so distractor sentences have
    // facts to state.
    for d in &drugs {
        if kb.targets_of(d)?.is_empty() {
            let p = take_protein(rng);
            add_target(&mut kb, &proteins[p], d, rng);
        }
    }

    let mut samples = Vec::with_capacity(plans.len());
    let mut ground_truth = Vec::with_capacity(plans.len());
    for (i, plan) in plans.iter().enumerate() {
        let id = format!("synth_{i:05}");
        let subject = &drugs[plan.subject];
        let answer = &drugs[plan.answer];
        let reach = reachable_drugs(&kb, subject)?;
        debug_assert!(reach.contains(answer));
        let mut pool: Vec<&EntityId> = drugs
            .iter()
            .filter(|d| *d != subject && !reach.contains(*d))
            .collect();
        if pool.len() < spec.candidates - 1 {
            return Err(Error::Infeasible(format!(
                "sample {id}: only {} drugs are unreachable from {subject}, need {}",
                pool.len(),
                spec.candidates - 1
            )));
        }
        pool.shuffle(rng);
        let distractors: Vec<EntityId> = pool[..spec.candidates - 1].iter().map(|d| (*d).clone()).collect();

        let acc = |i: usize| proteins[i].accession.as_str();
        let mut chain_sentences = Vec::new();
        let first = acc(plan.chain[0]);
        let a0 = &act_of[&(first.to_string(), subject.accession.clone())];
        chain_sentences.push(drug_sentence(&subject.accession, a0, first, rng));
        for w in plan.chain.windows(2) {
            chain_sentences.push(pathway_sentence(acc(w[0]), acc(w[1]), rng));
        }
        let last = acc(*plan.chain.last().unwrap());
        let a1 = &act_of[&(last.to_string(), answer.accession.clone())];
        chain_sentences.push(drug_sentence(&answer.accession, a1, last, rng));

        let rate = spec.distractor_rate;
        let n_distract = ((chain_sentences.len() as f64) * rate / (1.0 - rate)).round() as usize;
        let mut sentences = chain_sentences.clone();
        for _ in 0..n_distract {
            let d = distractors.choose(rng).expect("at least one distractor");
            let targets: Vec<EntityId> = kb.targets_of(d)?.into_iter().collect();
            let p = targets.choose(rng).expect("every drug has a target");
            let action = &act_of[&(p.accession.clone(), d.accession.clone())];
            sentences.push(drug_sentence(&d.accession, action, &p.accession, rng));
        }
        sentences.shuffle(rng);
        let n_docs = rng
            .random_range(spec.docs_min..=spec.docs_max)
            .min(sentences.len());
        let per = sentences.len().div_ceil(n_docs);
        let supports: Vec<String> = sentences.chunks(per).map(|c| c.join(" ")).collect();

        let mut candidates = distractors;
        candidates.push(answer.clone());
        candidates.shuffle(rng);

        let mut chain = vec![subject.accession.clone()];
        chain.extend(plan.chain.iter().map(|&p| proteins[p].accession.clone()));
        chain.push(answer.accession.clone());
        ground_truth.push(GroundTruth {
            id: id.clone(),
            subject: subject.accession.clone(),
            answer: answer.accession.clone(),
            chain,
            chain_sentences,
        });
        samples.push(Sample {
            id,
            subject: subject.clone(),
            relation: RELATION.to_string(),
            candidates,
            supports,
            answer: Some(answer.clone()),
        });
    }
    Ok(SynthCorpus {
        kb,
        samples,
        ground_truth,
    })
}
