//! Text encoders, span pooling, question co-attention and knowledge fusion.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kb::EntityId;
use crate::kg_embed::EmbeddingTable;
use crate::nn::BiLstm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaderConfig {
    pub word_dim: usize,
    /// Encoder output size `h` (both directions together).
    pub hidden: usize,
    /// Knowledge embedding size `d_k`.
    pub knowledge_dim: usize,
    pub fine_tune_knowledge: bool,
    /// Seed for the stand-in vectors of entities without an embedding.
    pub knowledge_seed: u64,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            word_dim: 64,
            hidden: 64,
            knowledge_dim: 32,
            fine_tune_knowledge: false,
            knowledge_seed: 17,
        }
    }
}

impl ReaderConfig {
    /// Node representation size `2h + 2d_k`.
    pub fn node_dim(&self) -> usize {
        2 * self.hidden + 2 * self.knowledge_dim
    }
}

/// Deterministic stand-in for a missing knowledge vector, unit norm in
/// expectation. `which` separates the two embedding models.
pub fn fallback_vector(seed: u64, which: &str, entity: &EntityId, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(which.as_bytes());
    h.update([0]);
    h.update(entity.to_string().as_bytes());
    h.update([entity.is_drug() as u8]);
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(bytes);
    let scale = 1.0 / (dim.max(1) as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

/// Entity rows for both knowledge matrices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeIndex {
    entities: Vec<EntityId>,
    #[serde(skip)]
    index: HashMap<EntityId, usize>,
}

impl KnowledgeIndex {
    pub fn get(&self, e: &EntityId) -> Option<usize> {
        self.index.get(e).copied()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[EntityId] {
        &self.entities
    }

    pub fn reindex(&mut self) {
        self.index = self.entities.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
    }
}

/// Builds the two knowledge matrices. Entities listed in `extra` but absent
/// from a table get fallback rows.
pub fn build_knowledge(
    transe: Option<&EmbeddingTable>,
    transh: Option<&EmbeddingTable>,
    extra: impl IntoIterator<Item = EntityId>,
    config: &ReaderConfig,
) -> Result<(KnowledgeIndex, Tensor, Tensor)> {
    let dim = config.knowledge_dim;
    for t in [transe, transh].into_iter().flatten() {
        if t.dim != dim {
            return Err(Error::Contract(format!(
                "knowledge_dim is {dim} but the {} table has dim {}",
                t.model.as_str(),
                t.dim
            )));
        }
    }
    let mut idx = KnowledgeIndex::default();
    let push = |e: EntityId, idx: &mut KnowledgeIndex| {
        if !idx.index.contains_key(&e) {
            idx.index.insert(e.clone(), idx.entities.len());
            idx.entities.push(e);
        }
    };
    for t in [transe, transh].into_iter().flatten() {
        for e in t.entities.keys() {
            push(e.clone(), &mut idx);
        }
    }
    for e in extra {
        push(e, &mut idx);
    }
    let fill = |table: Option<&EmbeddingTable>, which: &str| {
        let mut data = Vec::with_capacity(idx.len() * dim);
        for e in &idx.entities {
            match table.and_then(|t| t.entities.get(e)) {
                Some(v) => data.extend_from_slice(v),
                None => data.extend(fallback_vector(config.knowledge_seed, which, e, dim)),
            }
        }
        Tensor::new(vec![idx.len(), dim], data)
    };
    let e = fill(transe, "transe")?;
    let h = fill(transh, "transh")?;
    Ok((idx, e, h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderParams {
    pub words: ParamId,
    pub doc: BiLstm,
    pub question: BiLstm,
    pub candidate: BiLstm,
    /// Re-encoder of co-attended summaries.
    pub coattn: BiLstm,
    pub knowledge_transe: ParamId,
    pub knowledge_transh: ParamId,
}

impl ReaderParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ReaderConfig,
        word_embeddings: Tensor,
        knowledge: (Tensor, Tensor),
        rng: &mut R,
    ) -> Result<Self> {
        if word_embeddings.cols() != config.word_dim {
            return Err(Error::Contract(format!(
                "word embeddings have {} columns, word_dim is {}",
                word_embeddings.cols(),
                config.word_dim
            )));
        }
        let (wd, h) = (config.word_dim, config.hidden);
        let words = store.add("reader.words", word_embeddings);
        let doc = BiLstm::new(store, "reader.doc", wd, h, rng)?;
        let question = BiLstm::new(store, "reader.question", wd, h, rng)?;
        let candidate = BiLstm::new(store, "reader.candidate", wd, h, rng)?;
        let coattn = BiLstm::new(store, "reader.coattn", h, h, rng)?;
        let knowledge_transe = store.add("reader.knowledge.transe", knowledge.0);
        let knowledge_transh = store.add("reader.knowledge.transh", knowledge.1);
        store.set_frozen(knowledge_transe, !config.fine_tune_knowledge);
        store.set_frozen(knowledge_transh, !config.fine_tune_knowledge);
        Ok(Self {
            words,
            doc,
            question,
            candidate,
            coattn,
            knowledge_transe,
            knowledge_transh,
        })
    }
}

/// Token ids of one sample, ready for encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTokens {
    pub question: Vec<usize>,
    pub docs: Vec<Vec<usize>>,
    /// One id per candidate, in candidate order.
    pub candidates: Vec<usize>,
}

pub struct Encoded<'t> {
    /// `l_q × h`.
    pub question: Var<'t>,
    /// `T_i × h` per document; `None` for empty documents.
    pub docs: Vec<Option<Var<'t>>>,
    /// `|C| × h`.
    pub candidates: Var<'t>,
}

pub fn encode<'t>(tape: &'t Tape, store: &ParamStore, params: &ReaderParams, tokens: &SampleTokens) -> Result<Encoded<'t>> {
    if tokens.question.is_empty() {
        return Err(Error::Contract("empty question".into()));
    }
    let words = tape.param(store, params.words);
    let question = params.question.encode(tape, store, words.gather_rows(&tokens.question)?)?;
    let mut docs = Vec::with_capacity(tokens.docs.len());
    for (i, d) in tokens.docs.iter().enumerate() {
        if d.is_empty() {
            log::warn!("skipping empty support document {i}");
            docs.push(None);
        } else {
            docs.push(Some(params.doc.encode(tape, store, words.gather_rows(d)?)?));
        }
    }
    let candidates = params
        .candidate
        .encode_singletons(tape, store, words.gather_rows(&tokens.candidates)?)?;
    Ok(Encoded {
        question,
        docs,
        candidates,
    })
}

/// Where a node's base state comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeSource {
    Span { doc: usize, start: usize, end: usize },
    Candidate(usize),
}

/// Mean-pooled document states per span, or the candidate encoding.
/// Returns `n × h`.
pub fn node_states<'t>(tape: &'t Tape, enc: &Encoded<'t>, sources: &[NodeSource]) -> Result<Var<'t>> {
    let h = enc.candidates.shape()[1];
    let mut pool = Vec::new();
    let mut offsets = Vec::with_capacity(enc.docs.len());
    let mut rows = 0;
    for d in &enc.docs {
        offsets.push(rows);
        if let Some(v) = d {
            rows += v.shape()[0];
            pool.push(*v);
        }
    }
    let cand_offset = rows;
    pool.push(enc.candidates);
    let pool = Var::concat(&pool, 0)?;
    let mut gather = Vec::new();
    let mut seg = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        match *src {
            NodeSource::Span { doc, start, end } => {
                let len = enc
                    .docs
                    .get(doc)
                    .and_then(|d| d.as_ref())
                    .map(|v| v.shape()[0])
                    .ok_or_else(|| Error::Contract(format!("node {i} points at missing document {doc}")))?;
                if start >= end || end > len {
                    return Err(Error::Contract(format!("span {start}..{end} out of bounds for document {doc} of length {len}")));
                }
                for t in start..end {
                    gather.push(offsets[doc] + t);
                    seg.push(i);
                }
            }
            NodeSource::Candidate(c) => {
                if c >= enc.candidates.shape()[0] {
                    return Err(Error::Contract(format!("candidate {c} out of range")));
                }
                gather.push(cand_offset + c);
                seg.push(i);
            }
        }
    }
    if sources.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[0, h])));
    }
    pool.gather_rows(&gather)?.segment_mean(&seg, sources.len())
}

/// Co-attention of one node state (`1×h`) with the question (`l_q×h`),
/// computed term by term. Returns `(C_node, D_node)`, each `1×h`.
pub fn coattend<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    f: &BiLstm,
    node: Var<'t>,
    question: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let affinity = node.matmul(question.transpose()?)?;
    let c_q = affinity.transpose()?.softmax(1)?.matmul(node)?;
    let attn = affinity.softmax(1)?;
    let c_node = attn.matmul(question)?;
    let d_node = f.encode(tape, store, attn.matmul(c_q)?)?;
    Ok((c_node, d_node))
}

/// Row-batched co-attention for `n` nodes at once; equal to calling
/// [`coattend`] per row.
pub fn coattend_batch<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    f: &BiLstm,
    nodes: Var<'t>,
    question: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let n = nodes.shape()[0];
    let h = nodes.shape()[1];
    if n == 0 {
        let z = tape.constant(Tensor::zeros(&[0, h]));
        return Ok((z, z));
    }
    let l_q = question.shape()[0];
    let affinity = nodes.matmul(question.transpose()?)?;
    let attn = affinity.softmax(1)?;
    let c_node = attn.matmul(question)?;
    // Each node's question-side context has every row equal to the node
    // itself, so attending over it returns the node scaled by the attention
    // mass.
    let mass = attn.matmul(crate::nn::ones(tape, l_q, 1))?;
    let d_node = f.encode_singletons(tape, store, nodes.scale_rows(mass)?)?;
    Ok((c_node, d_node))
}

/// `[C ‖ D ‖ K_transe ‖ K_transh]` row-wise.
pub fn fuse<'t>(c: Var<'t>, d: Var<'t>, k_transe: Var<'t>, k_transh: Var<'t>) -> Result<Var<'t>> {
    if c.shape() != d.shape() || k_transe.shape() != k_transh.shape() || c.shape()[0] != k_transe.shape()[0] {
        return Err(Error::Shape {
            op: "fuse",
            lhs: c.shape(),
            rhs: k_transe.shape(),
        });
    }
    Var::concat(&[c, d, k_transe, k_transh], 1)
}

/// Knowledge rows for `entities`; entities missing from the index get
/// their fallback vectors as constants. With `zero` set, both slices are
/// zero.
pub fn knowledge_rows<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &ReaderParams,
    index: &KnowledgeIndex,
    config: &ReaderConfig,
    entities: &[&EntityId],
    zero: bool,
) -> Result<(Var<'t>, Var<'t>)> {
    let dim = config.knowledge_dim;
    let n = entities.len();
    if zero || n == 0 {
        let z = tape.constant(Tensor::zeros(&[n, dim]));
        return Ok((z, z));
    }
    let mut known = Vec::new();
    let mut missing = Vec::new();
    let mut slots = Vec::with_capacity(n);
    for e in entities {
        match index.get(e) {
            Some(r) => {
                slots.push((true, known.len()));
                known.push(r);
            }
            None => {
                slots.push((false, missing.len()));
                missing.push(*e);
            }
        }
    }
    let order: Vec<usize> = slots
        .into_iter()
        .map(|(is_known, pos)| if is_known { pos } else { known.len() + pos })
        .collect();
    let build = |id: ParamId, which: &str| -> Result<Var<'t>> {
        let mut parts = Vec::new();
        if !known.is_empty() {
            parts.push(tape.param(store, id).gather_rows(&known)?);
        }
        if !missing.is_empty() {
            let data = missing
                .iter()
                .flat_map(|e| fallback_vector(config.knowledge_seed, which, e, dim))
                .collect();
            parts.push(tape.constant(Tensor::new(vec![missing.len(), dim], data)?));
        }
        let all = Var::concat(&parts, 0)?;
        if missing.is_empty() {
            Ok(all)
        } else {
            all.gather_rows(&order)
        }
    };
    Ok((
        build(params.knowledge_transe, "transe")?,
        build(params.knowledge_transh, "transh")?,
    ))
}
