//! The full reader: encoders, knowledge fusion, graph reasoning and the
//! candidate scorer, plus checkpoints.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::corpus::{build_vocab, tokenize, EntityCatalog, Sample, Vocabulary};
use crate::error::{Error, Result};
use crate::gat::{self, AttentionMaps, GatConfig, GatParams, RelationEdges};
use crate::graph::{build_graph, BuildOptions, Caps, GraphScores, NodeKind, ReasoningGraph};
use crate::kb::{EntityId, KnowledgeBase};
use crate::kg_embed::EmbeddingTable;
use crate::reader::{self, KnowledgeIndex, NodeSource, ReaderConfig, ReaderParams, SampleTokens};

pub const CHECKPOINT_FORMAT: &str = "medkgqa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Switches that remove one model component each.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_knowledge_fusion: bool,
    pub no_graph_reasoning: bool,
    pub merge_edge_types: bool,
    pub drop_subject_nodes: bool,
    pub drop_reasoning_nodes: bool,
    pub drop_mention_nodes: bool,
    pub drop_candidate_nodes: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 7] = [
        "no_knowledge_fusion",
        "no_graph_reasoning",
        "merge_edge_types",
        "drop_subject_nodes",
        "drop_reasoning_nodes",
        "drop_mention_nodes",
        "drop_candidate_nodes",
    ];

    fn slot(&mut self, flag: &str) -> Result<&mut bool> {
        Ok(match flag {
            "no_knowledge_fusion" => &mut self.no_knowledge_fusion,
            "no_graph_reasoning" => &mut self.no_graph_reasoning,
            "merge_edge_types" => &mut self.merge_edge_types,
            "drop_subject_nodes" => &mut self.drop_subject_nodes,
            "drop_reasoning_nodes" => &mut self.drop_reasoning_nodes,
            "drop_mention_nodes" => &mut self.drop_mention_nodes,
            "drop_candidate_nodes" => &mut self.drop_candidate_nodes,
            other => return Err(Error::Contract(format!("unknown ablation flag {other:?}"))),
        })
    }

    pub fn set(&mut self, flag: &str, on: bool) -> Result<()> {
        *self.slot(flag)? = on;
        Ok(())
    }

    pub fn from_flags<S: AsRef<str>>(flags: &[S]) -> Result<Self> {
        let mut a = Self::default();
        for f in flags {
            a.set(f.as_ref(), true)?;
        }
        a.validate()?;
        Ok(a)
    }

    pub fn active(&self) -> Vec<&'static str> {
        let mut me = self.clone();
        Self::FLAGS
            .into_iter()
            .filter(|f| *me.slot(f).expect("known flag"))
            .collect()
    }

    /// Report label: `full` or the active flags joined with `+`.
    pub fn tag(&self) -> String {
        let a = self.active();
        if a.is_empty() {
            "full".into()
        } else {
            a.join("+")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_graph_reasoning {
            for (on, name) in [
                (self.merge_edge_types, "merge_edge_types"),
                (self.drop_subject_nodes, "drop_subject_nodes"),
                (self.drop_reasoning_nodes, "drop_reasoning_nodes"),
                (self.drop_mention_nodes, "drop_mention_nodes"),
                (self.drop_candidate_nodes, "drop_candidate_nodes"),
            ] {
                if on {
                    return Err(Error::Contract(format!("{name} contradicts no_graph_reasoning")));
                }
            }
        }
        Ok(())
    }

    pub fn dropped_kinds(&self) -> BTreeSet<NodeKind> {
        [
            (self.drop_subject_nodes, NodeKind::Subject),
            (self.drop_reasoning_nodes, NodeKind::Reasoning),
            (self.drop_mention_nodes, NodeKind::Mention),
            (self.drop_candidate_nodes, NodeKind::Candidate),
        ]
        .into_iter()
        .filter_map(|(on, k)| on.then_some(k))
        .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub reader: ReaderConfig,
    pub gat: GatConfig,
    pub caps: Caps,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Graph attention settings with the ablation switches applied.
    pub fn effective_gat(&self) -> GatConfig {
        GatConfig {
            merge_edge_types: self.gat.merge_edge_types || self.ablation.merge_edge_types,
            ..self.gat.clone()
        }
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            caps: self.caps,
            drop: self.ablation.dropped_kinds(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.gat.validate()?;
        if self.reader.hidden == 0 || !self.reader.hidden.is_multiple_of(2) {
            return Err(Error::Contract("hidden size must be even and positive".into()));
        }
        Ok(())
    }
}

/// A sample turned into token ids plus its reasoning graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub tokens: SampleTokens,
    pub graph: ReasoningGraph,
    /// Gold position in `graph.candidates`, if present.
    pub target: Option<usize>,
    pub n_docs: usize,
}

pub struct ForwardOutput<'t> {
    /// `1 × |C|`.
    pub scores: Var<'t>,
    pub attention: AttentionMaps,
    pub relations: RelationEdges,
    /// Graph node states after the last hop; absent without graph reasoning.
    pub nodes: Option<Var<'t>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub knowledge: KnowledgeIndex,
    pub store: ParamStore,
    pub reader: ReaderParams,
    pub gat: GatParams,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        vocab: Vocabulary,
        word_embeddings: Tensor,
        knowledge: (KnowledgeIndex, Tensor, Tensor),
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (index, ke, kh) = knowledge;
        let reader = ReaderParams::new(&mut store, &config.reader, word_embeddings, (ke, kh), rng)?;
        let gat = GatParams::new(
            &mut store,
            &config.effective_gat(),
            config.reader.word_dim,
            config.reader.hidden,
            config.reader.node_dim(),
            rng,
        )?;
        Ok(Self {
            config,
            vocab,
            knowledge: index,
            store,
            reader,
            gat,
        })
    }

    /// Vocabulary from `samples`, knowledge rows for every table entity and
    /// every sample entity, then fresh parameters.
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        samples: &[Sample],
        kb: &KnowledgeBase,
        transe: Option<&EmbeddingTable>,
        transh: Option<&EmbeddingTable>,
        rng: &mut R,
    ) -> Result<Self> {
        let (vocab, emb) = build_vocab(samples, config.reader.word_dim, rng);
        let mut extra: BTreeSet<EntityId> = kb.drugs().into_iter().chain(kb.proteins()).collect();
        for s in samples {
            extra.insert(s.subject.clone());
            extra.extend(s.candidates.iter().cloned());
        }
        let knowledge = reader::build_knowledge(transe, transh, extra, &config.reader)?;
        Self::new(config, vocab, emb, knowledge, rng)
    }

    /// Tokenizes, builds the graph and maps tokens to ids. With `training`
    /// set the gold answer survives candidate truncation.
    pub fn prepare(&self, sample: &Sample, kb: &KnowledgeBase, catalog: &EntityCatalog, training: bool) -> Result<Prepared> {
        let docs: Vec<_> = sample.supports.iter().map(|d| tokenize(d, catalog)).collect();
        let keep = if training { sample.answer.as_ref() } else { None };
        let graph = build_graph(sample, &docs, kb, &self.config.build_options(), keep)?;
        let ids = |toks: &[String]| toks.iter().map(|t| self.vocab.id(t)).collect::<Vec<_>>();
        let question = ids(&tokenize(&sample.query(), &EntityCatalog::new()).tokens);
        let tokens = SampleTokens {
            question,
            docs: docs.iter().map(|d| ids(&d.tokens)).collect(),
            candidates: graph.candidates.iter().map(|c| self.vocab.id(&c.accession)).collect(),
        };
        let target = sample
            .answer
            .as_ref()
            .and_then(|a| graph.candidates.iter().position(|c| c == a));
        Ok(Prepared {
            id: sample.id.clone(),
            tokens,
            graph,
            target,
            n_docs: sample.supports.len(),
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &Prepared) -> Result<ForwardOutput<'t>> {
        let store = &self.store;
        let graph = &p.graph;
        let n_graph = graph.nodes.len();
        let n_cand = graph.candidates.len();
        let enc = reader::encode(tape, store, &self.reader, &p.tokens)?;

        let mut sources = Vec::with_capacity(n_graph + n_cand);
        let mut entities: Vec<&EntityId> = Vec::with_capacity(n_graph + n_cand);
        for node in &graph.nodes {
            sources.push(match (node.doc, node.span) {
                (Some(doc), Some((start, end))) => NodeSource::Span { doc, start, end },
                _ => NodeSource::Candidate(
                    graph
                        .candidates
                        .iter()
                        .position(|c| c == &node.entity)
                        .ok_or_else(|| Error::Contract(format!("candidate node {} not in candidate list", node.entity)))?,
                ),
            });
            entities.push(&node.entity);
        }
        let cand_nodes = graph.candidate_nodes();
        if cand_nodes.is_none() {
            for (c, e) in graph.candidates.iter().enumerate() {
                sources.push(NodeSource::Candidate(c));
                entities.push(e);
            }
        }
        let h = reader::node_states(tape, &enc, &sources)?;
        let (c, d) = reader::coattend_batch(tape, store, &self.reader.coattn, h, enc.question)?;
        let (ke, kh) = reader::knowledge_rows(
            tape,
            store,
            &self.reader,
            &self.knowledge,
            &self.config.reader,
            &entities,
            self.config.ablation.no_knowledge_fusion,
        )?;
        let u0 = reader::fuse(c, d, ke, kh)?;

        let gat_config = self.config.effective_gat();
        let relations = RelationEdges::from_graph(graph, gat_config.merge_edge_types);
        if self.config.ablation.no_graph_reasoning {
            let cand = match &cand_nodes {
                Some(ids) => u0.gather_rows(ids)?,
                None => u0.slice_rows(n_graph, n_graph + n_cand)?,
            };
            let scores = gat::score_candidates(tape, store, &self.gat, cand, None, &[])?;
            return Ok(ForwardOutput {
                scores,
                attention: AttentionMaps::default(),
                relations,
                nodes: None,
            });
        }

        let words = tape.param(store, self.reader.words);
        let hq = gat::gate_question(tape, store, &self.gat.question_gate, words.gather_rows(&p.tokens.question)?)?;
        let u_graph = if cand_nodes.is_some() { u0 } else { u0.slice_rows(0, n_graph)? };
        let (u, attention) = gat::forward(tape, store, &self.gat, &gat_config, u_graph, &relations, hq)?;
        let cand = match &cand_nodes {
            Some(ids) => u.gather_rows(ids)?,
            None => u0.slice_rows(n_graph, n_graph + n_cand)?,
        };
        let mention_ids = graph.node_ids(NodeKind::Mention);
        let owner: Vec<usize> = mention_ids
            .iter()
            .map(|&m| {
                graph
                    .candidates
                    .iter()
                    .position(|c| c == &graph.nodes[m].entity)
                    .expect("mentions belong to candidates")
            })
            .collect();
        let mentions = if mention_ids.is_empty() {
            None
        } else {
            Some(u.gather_rows(&mention_ids)?)
        };
        let scores = gat::score_candidates(tape, store, &self.gat, cand, mentions, &owner)?;
        Ok(ForwardOutput {
            scores,
            attention,
            relations,
            nodes: Some(u),
        })
    }

    /// Candidate scores in `graph.candidates` order.
    pub fn scores(&self, p: &Prepared) -> Result<Vec<f64>> {
        let tape = Tape::new();
        Ok(self.forward(&tape, p)?.scores.value().data().to_vec())
    }

    /// Cross-entropy loss and gradients for one sample with a target.
    pub fn loss_and_grads(&self, p: &Prepared) -> Result<(f64, crate::autodiff::Gradients)> {
        let target = p
            .target
            .ok_or_else(|| Error::Contract(format!("sample {} has no trainable target", p.id)))?;
        let tape = Tape::new();
        let out = self.forward(&tape, p)?;
        let loss = out.scores.softmax_cross_entropy(target)?;
        let grads = tape.backward(loss)?;
        Ok((loss.value().item(), grads))
    }

    /// Edge attention and node transparency for export: candidate nodes get
    /// their softmax probability, mention nodes a softmax over mentions.
    pub fn graph_scores(&self, p: &Prepared) -> Result<GraphScores> {
        let tape = Tape::new();
        let out = self.forward(&tape, p)?;
        let scores = out.scores.value();
        let probs = softmax(scores.data());
        let mut node_scores = vec![None; p.graph.nodes.len()];
        if let Some(ids) = p.graph.candidate_nodes() {
            for (c, id) in ids.into_iter().enumerate() {
                node_scores[id] = Some(probs[c]);
            }
        }
        let mention_ids = p.graph.node_ids(NodeKind::Mention);
        if let (Some(u), false) = (out.nodes, mention_ids.is_empty()) {
            let f = self.gat.f_men.forward(&tape, &self.store, u.gather_rows(&mention_ids)?)?.value();
            for (&id, pr) in mention_ids.iter().zip(softmax(f.data())) {
                node_scores[id] = Some(pr);
            }
        }
        Ok(GraphScores {
            edge_weights: out.attention.edge_weights(&out.relations, p.graph.edges.len()),
            node_scores,
        })
    }

    /// Shapes of every parameter agree with the configuration.
    pub fn check_dims(&self) -> Result<()> {
        let rc = &self.config.reader;
        let d = rc.node_dim();
        let mut checks = vec![
            ("word_dim", self.store.get(self.reader.words).cols(), rc.word_dim),
            ("vocab size", self.store.get(self.reader.words).rows(), self.vocab.len()),
            ("knowledge_dim", self.store.get(self.reader.knowledge_transe).cols(), rc.knowledge_dim),
            ("knowledge_dim", self.store.get(self.reader.knowledge_transh).cols(), rc.knowledge_dim),
            ("knowledge rows", self.store.get(self.reader.knowledge_transe).rows(), self.knowledge.len()),
            ("hidden", self.reader.doc.hidden(), rc.hidden),
            ("node_dim", self.gat.node_dim, d),
            ("relation slots", self.gat.relations.len(), self.config.effective_gat().slots()),
        ];
        for heads in &self.gat.relations {
            checks.push(("heads", heads.len(), self.config.gat.heads));
            for r in heads {
                checks.push(("node_dim", self.store.get(r.w).rows(), d));
            }
        }
        for (field, got, want) in checks {
            if got != want {
                return Err(Error::Contract(format!("checkpoint {field} mismatch: parameters have {got}, config says {want}")));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        let ck = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            vocab_hash: self.vocab.hash(),
            model: self,
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_checkpoint(json: &str, expected_vocab_hash: Option<&str>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(json)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let mut m = ck.model;
        m.vocab.reindex();
        m.knowledge.reindex();
        m.store.reindex();
        let actual = m.vocab.hash();
        if actual != ck.vocab_hash || expected_vocab_hash.is_some_and(|e| e != actual) {
            return Err(Error::Format(format!(
                "vocabulary hash mismatch: checkpoint records {}, vocabulary hashes to {actual}",
                ck.vocab_hash
            )));
        }
        m.check_dims()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected_vocab_hash: Option<&str>) -> Result<Self> {
        Self::from_checkpoint(&fs::read_to_string(path)?, expected_vocab_hash)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    vocab_hash: String,
    model: &'a Model,
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    vocab_hash: String,
    model: Model,
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
