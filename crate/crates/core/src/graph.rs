//! Reasoning graphs: node extraction, protein selection, typed edges,
//! truncation and export.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, TokenizedDoc};
use crate::error::{Error, Result};
use crate::kb::{EntityId, EntityKind, KnowledgeBase};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Subject,
    Reasoning,
    Mention,
    Candidate,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [
        NodeKind::Subject,
        NodeKind::Reasoning,
        NodeKind::Mention,
        NodeKind::Candidate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Subject => "subject",
            NodeKind::Reasoning => "reasoning",
            NodeKind::Mention => "mention",
            NodeKind::Candidate => "candidate",
        }
    }

    fn entity_kind(self) -> EntityKind {
        match self {
            NodeKind::Reasoning => EntityKind::Protein,
            _ => EntityKind::Drug,
        }
    }

    fn color(self) -> &'static str {
        match self {
            NodeKind::Subject => "2ca02c",
            NodeKind::Reasoning => "9467bd",
            NodeKind::Mention => "8c564b",
            NodeKind::Candidate => "d62728",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Sub2Rea,
    Rea2Rea,
    Rea2Men,
    Men2Can,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 4] = [
        EdgeKind::Sub2Rea,
        EdgeKind::Rea2Rea,
        EdgeKind::Rea2Men,
        EdgeKind::Men2Can,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Sub2Rea => "sub2rea",
            EdgeKind::Rea2Rea => "rea2rea",
            EdgeKind::Rea2Men => "rea2men",
            EdgeKind::Men2Can => "men2can",
        }
    }

    pub fn is_directed(self) -> bool {
        matches!(self, EdgeKind::Sub2Rea | EdgeKind::Rea2Men)
    }

    /// Node kinds at (src, dst).
    pub fn endpoints(self) -> (NodeKind, NodeKind) {
        match self {
            EdgeKind::Sub2Rea => (NodeKind::Subject, NodeKind::Reasoning),
            EdgeKind::Rea2Rea => (NodeKind::Reasoning, NodeKind::Reasoning),
            EdgeKind::Rea2Men => (NodeKind::Reasoning, NodeKind::Mention),
            EdgeKind::Men2Can => (NodeKind::Mention, NodeKind::Candidate),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub entity: EntityId,
    pub doc: Option<usize>,
    pub span: Option<(usize, usize)>,
    /// Occurrence counter of this entity among nodes of the same kind.
    pub ordinal: usize,
}

impl GraphNode {
    fn position(&self) -> (usize, usize) {
        (
            self.doc.unwrap_or(usize::MAX),
            self.span.map_or(usize::MAX, |s| s.0),
        )
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.entity.accession, self.ordinal)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypedEdge {
    pub kind: EdgeKind,
    pub src: usize,
    pub dst: usize,
    pub directed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReasoningGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<TypedEdge>,
    pub candidates: Vec<EntityId>,
}

impl ReasoningGraph {
    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn node_ids(&self, kind: NodeKind) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].kind == kind).collect()
    }

    /// Node id of each candidate's Candidate node, in candidate order, or
    /// `None` when candidate nodes were dropped.
    pub fn candidate_nodes(&self) -> Option<Vec<usize>> {
        let cands = self.node_ids(NodeKind::Candidate);
        self.candidates
            .iter()
            .map(|c| cands.iter().copied().find(|&i| &self.nodes[i].entity == c))
            .collect()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.entity.kind != n.kind.entity_kind() {
                return Err(Error::Contract(format!("node {i} has the wrong entity kind")));
            }
            if (n.kind == NodeKind::Candidate) != n.doc.is_none() || n.doc.is_none() != n.span.is_none() {
                return Err(Error::Contract(format!("node {i} has inconsistent doc/span")));
            }
            if !seen.insert((n.kind == NodeKind::Candidate, &n.entity, n.doc, n.span)) {
                return Err(Error::Contract(format!("node {i} is duplicated")));
            }
            if n.kind == NodeKind::Mention && !self.candidates.contains(&n.entity) {
                return Err(Error::Contract(format!("mention {i} is not a candidate")));
            }
        }
        for e in &self.edges {
            let (s, d) = e.kind.endpoints();
            let ok = e.src < self.nodes.len()
                && e.dst < self.nodes.len()
                && self.nodes[e.src].kind == s
                && self.nodes[e.dst].kind == d
                && e.directed == e.kind.is_directed();
            if !ok {
                return Err(Error::Contract(format!("edge {e:?} violates its kind")));
            }
        }
        Ok(())
    }
}

/// Spans found in the supports, before protein selection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtractedNodes {
    pub subject: Vec<GraphNode>,
    /// Every protein occurrence (P_ex).
    pub proteins: Vec<GraphNode>,
    pub mentions: Vec<GraphNode>,
    pub candidates: Vec<GraphNode>,
}

fn assign_ordinals(nodes: &mut [GraphNode]) {
    let mut counts: HashMap<EntityId, usize> = HashMap::new();
    for n in nodes {
        let c = counts.entry(n.entity.clone()).or_default();
        n.ordinal = *c;
        *c += 1;
    }
}

pub fn extract_nodes(sample: &Sample, docs: &[TokenizedDoc]) -> ExtractedNodes {
    let mut out = ExtractedNodes::default();
    for (d, doc) in docs.iter().enumerate() {
        for span in &doc.entity_spans {
            let node = |kind| GraphNode {
                kind,
                entity: span.entity.clone(),
                doc: Some(d),
                span: Some((span.start, span.end)),
                ordinal: 0,
            };
            match span.entity.kind {
                EntityKind::Protein => out.proteins.push(node(NodeKind::Reasoning)),
                EntityKind::Drug if span.entity.accession == sample.subject.accession => {
                    out.subject.push(node(NodeKind::Subject))
                }
                EntityKind::Drug if sample.candidates.iter().any(|c| c.accession == span.entity.accession) => {
                    out.mentions.push(node(NodeKind::Mention))
                }
                EntityKind::Drug => {}
            }
        }
    }
    out.candidates = sample
        .candidates
        .iter()
        .map(|c| GraphNode {
            kind: NodeKind::Candidate,
            entity: c.clone(),
            doc: None,
            span: None,
            ordinal: 0,
        })
        .collect();
    assign_ordinals(&mut out.subject);
    assign_ordinals(&mut out.proteins);
    assign_ordinals(&mut out.mentions);
    out
}

/// Iterative protein selection: starting from the subject's targets that
/// occur in the text, follow pathway interactions restricted to in-text
/// proteins. Returns the selected protein entities.
pub fn select_protein_entities(
    subject: &EntityId,
    in_text: &BTreeSet<EntityId>,
    kb: &KnowledgeBase,
) -> Result<BTreeSet<EntityId>> {
    let mut frontier: VecDeque<EntityId> = kb
        .targets_of(subject)?
        .into_iter()
        .filter(|p| in_text.contains(p))
        .collect();
    let mut selected = BTreeSet::new();
    while let Some(p) = frontier.pop_front() {
        if !selected.insert(p.clone()) {
            continue;
        }
        for q in kb.interactors_of(&p, false)? {
            if in_text.contains(&q) && !selected.contains(&q) {
                frontier.push_back(q);
            }
        }
    }
    Ok(selected)
}

/// Every occurrence of a selected protein, in document order.
pub fn select_proteins(subject: &EntityId, proteins: &[GraphNode], kb: &KnowledgeBase) -> Result<Vec<GraphNode>> {
    let in_text: BTreeSet<EntityId> = proteins.iter().map(|n| n.entity.clone()).collect();
    let chosen = select_protein_entities(subject, &in_text, kb)?;
    Ok(proteins.iter().filter(|n| chosen.contains(&n.entity)).cloned().collect())
}

/// Applies the four edge rules to every node pair.
pub fn connect_edges(nodes: &[GraphNode], subject: &EntityId, kb: &KnowledgeBase) -> Result<Vec<TypedEdge>> {
    let ids = |k: NodeKind| (0..nodes.len()).filter(move |&i| nodes[i].kind == k);
    let subject_targets = kb.targets_of(subject)?;
    let mut edges = Vec::new();
    for s in ids(NodeKind::Subject) {
        for r in ids(NodeKind::Reasoning) {
            if subject_targets.contains(&nodes[r].entity) {
                edges.push(TypedEdge {
                    kind: EdgeKind::Sub2Rea,
                    src: s,
                    dst: r,
                    directed: true,
                });
            }
        }
    }
    let rea: Vec<usize> = ids(NodeKind::Reasoning).collect();
    for (x, &a) in rea.iter().enumerate() {
        for &b in &rea[x + 1..] {
            let (pa, pb) = (&nodes[a].entity, &nodes[b].entity);
            let (src, dst) = if kb.has_pathway(&pa.accession, &pb.accession) {
                (a, b)
            } else if kb.has_pathway(&pb.accession, &pa.accession) {
                (b, a)
            } else {
                continue;
            };
            edges.push(TypedEdge {
                kind: EdgeKind::Rea2Rea,
                src,
                dst,
                directed: false,
            });
        }
    }
    let mut target_cache: HashMap<&EntityId, BTreeSet<EntityId>> = HashMap::new();
    for m in ids(NodeKind::Mention) {
        let drug = &nodes[m].entity;
        if !target_cache.contains_key(drug) {
            target_cache.insert(drug, kb.targets_of(drug)?);
        }
        let targets = &target_cache[drug];
        for &r in &rea {
            if targets.contains(&nodes[r].entity) {
                edges.push(TypedEdge {
                    kind: EdgeKind::Rea2Men,
                    src: r,
                    dst: m,
                    directed: true,
                });
            }
        }
    }
    for m in ids(NodeKind::Mention) {
        for c in ids(NodeKind::Candidate) {
            if nodes[c].entity == nodes[m].entity {
                edges.push(TypedEdge {
                    kind: EdgeKind::Men2Can,
                    src: m,
                    dst: c,
                    directed: false,
                });
            }
        }
    }
    Ok(edges)
}

/// Per-kind node caps: subject, reasoning, mention, candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    pub subject: usize,
    pub reasoning: usize,
    pub mention: usize,
    pub candidate: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            subject: 200,
            reasoning: 800,
            mention: 100,
            candidate: 9,
        }
    }
}

impl Caps {
    fn of(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Subject => self.subject,
            NodeKind::Reasoning => self.reasoning,
            NodeKind::Mention => self.mention,
            NodeKind::Candidate => self.candidate,
        }
    }
}

/// Candidate list under the cap. With `keep` set (training), an answer past
/// the cap replaces the last kept candidate.
pub fn truncate_candidates(candidates: &[EntityId], cap: usize, keep: Option<&EntityId>) -> Vec<EntityId> {
    let mut out: Vec<EntityId> = candidates.iter().take(cap).cloned().collect();
    if let Some(a) = keep {
        if cap > 0 && !out.contains(a) && candidates.contains(a) {
            *out.last_mut().expect("cap > 0") = a.clone();
        }
    }
    out
}

/// Keeps the first `cap` nodes of each kind in document order, then drops
/// mentions of removed candidates and every edge touching a removed node.
/// `keep` is the gold answer during training and `None` at evaluation.
pub fn truncate(graph: &ReasoningGraph, caps: &Caps, keep: Option<&EntityId>) -> ReasoningGraph {
    let candidates = truncate_candidates(&graph.candidates, caps.candidate, keep);
    let mut keep_node = vec![false; graph.nodes.len()];
    for kind in NodeKind::ALL {
        let mut ids = graph.node_ids(kind);
        if kind == NodeKind::Candidate {
            ids.retain(|&i| candidates.contains(&graph.nodes[i].entity));
        } else {
            ids.sort_by_key(|&i| graph.nodes[i].position());
            ids.truncate(caps.of(kind));
        }
        for i in ids {
            keep_node[i] = kind != NodeKind::Mention || candidates.contains(&graph.nodes[i].entity);
        }
    }
    let mut remap = vec![usize::MAX; graph.nodes.len()];
    let mut nodes = Vec::new();
    for kind in NodeKind::ALL {
        for i in graph.node_ids(kind) {
            if keep_node[i] {
                remap[i] = nodes.len();
                nodes.push(graph.nodes[i].clone());
            }
        }
    }
    let edges = graph
        .edges
        .iter()
        .filter(|e| keep_node[e.src] && keep_node[e.dst])
        .map(|e| TypedEdge {
            src: remap[e.src],
            dst: remap[e.dst],
            ..e.clone()
        })
        .collect();
    ReasoningGraph {
        nodes,
        edges,
        candidates,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub caps: Caps,
    /// Node kinds removed before edges are connected. Dropping candidates
    /// keeps the candidate list but removes their nodes.
    pub drop: BTreeSet<NodeKind>,
}

/// Extraction, selection, edges and truncation for one sample. Pass the
/// answer as `keep` only during training.
pub fn build_graph(
    sample: &Sample,
    docs: &[TokenizedDoc],
    kb: &KnowledgeBase,
    options: &BuildOptions,
    keep: Option<&EntityId>,
) -> Result<ReasoningGraph> {
    let ex = extract_nodes(sample, docs);
    let reasoning = select_proteins(&sample.subject, &ex.proteins, kb)?;
    let mut nodes = Vec::new();
    for (kind, group) in [
        (NodeKind::Subject, ex.subject),
        (NodeKind::Reasoning, reasoning),
        (NodeKind::Mention, ex.mentions),
        (NodeKind::Candidate, ex.candidates),
    ] {
        if !options.drop.contains(&kind) {
            nodes.extend(group);
        }
    }
    let edges = connect_edges(&nodes, &sample.subject, kb)?;
    let full = ReasoningGraph {
        nodes,
        edges,
        candidates: sample.candidates.clone(),
    };
    Ok(truncate(&full, &options.caps, keep))
}

/// Optional visual weights: one attention weight per edge and one score per
/// node, both expected in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphScores {
    pub edge_weights: Vec<f64>,
    pub node_scores: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Dot,
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(ExportFormat::Dot),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::Format(format!("unknown graph format {other:?}"))),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::Dot => "dot",
            ExportFormat::Json => "json",
        })
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn to_dot(graph: &ReasoningGraph, scores: Option<&GraphScores>) -> String {
    let mut out = String::from("digraph reasoning {\n  node [style=filled];\n");
    for (i, n) in graph.nodes.iter().enumerate() {
        let score = scores
            .and_then(|s| s.node_scores.get(i).copied().flatten())
            .filter(|_| matches!(n.kind, NodeKind::Mention | NodeKind::Candidate));
        let alpha = score.map_or(255, |p| (55.0 + 200.0 * p.clamp(0.0, 1.0)).round() as u8);
        out.push_str(&format!(
            "  n{i} [label=\"{}\", kind=\"{}\", fillcolor=\"#{}{alpha:02x}\"];\n",
            escape(&n.label()),
            n.kind.as_str(),
            n.kind.color()
        ));
    }
    for (k, e) in graph.edges.iter().enumerate() {
        let mut attrs = format!("label=\"{}\"", e.kind.as_str());
        if !e.directed {
            attrs.push_str(", dir=none");
        }
        if let Some(w) = scores.and_then(|s| s.edge_weights.get(k)) {
            attrs.push_str(&format!(", attention=\"{w:.4}\", penwidth={:.3}", 0.5 + 4.5 * w.clamp(0.0, 1.0)));
        }
        out.push_str(&format!("  n{} -> n{} [{attrs}];\n", e.src, e.dst));
    }
    out.push_str("}\n");
    out
}

#[derive(Serialize, Deserialize)]
struct JsonNode {
    id: usize,
    kind: NodeKind,
    entity: String,
    doc: Option<usize>,
    span: Option<(usize, usize)>,
    ordinal: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonEdge {
    kind: EdgeKind,
    src: usize,
    dst: usize,
    directed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonGraph {
    nodes: Vec<JsonNode>,
    edges: Vec<JsonEdge>,
    candidates: Vec<String>,
}

pub fn to_json(graph: &ReasoningGraph, scores: Option<&GraphScores>) -> Result<String> {
    let g = JsonGraph {
        nodes: graph
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| JsonNode {
                id,
                kind: n.kind,
                entity: n.entity.accession.clone(),
                doc: n.doc,
                span: n.span,
                ordinal: n.ordinal,
            })
            .collect(),
        edges: graph
            .edges
            .iter()
            .enumerate()
            .map(|(k, e)| JsonEdge {
                kind: e.kind,
                src: e.src,
                dst: e.dst,
                directed: e.directed,
                weight: scores.and_then(|s| s.edge_weights.get(k).copied()),
            })
            .collect(),
        candidates: graph.candidates.iter().map(|c| c.accession.clone()).collect(),
    };
    Ok(serde_json::to_string_pretty(&g)?)
}

pub fn from_json(json: &str) -> Result<ReasoningGraph> {
    let g: JsonGraph = serde_json::from_str(json)?;
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for (i, n) in g.nodes.into_iter().enumerate() {
        if n.id != i {
            return Err(Error::Format(format!("node ids must be 0..n in order, got {} at {i}", n.id)));
        }
        nodes.push(GraphNode {
            kind: n.kind,
            entity: EntityId {
                kind: n.kind.entity_kind(),
                accession: n.entity,
            },
            doc: n.doc,
            span: n.span,
            ordinal: n.ordinal,
        });
    }
    let graph = ReasoningGraph {
        nodes,
        edges: g
            .edges
            .into_iter()
            .map(|e| TypedEdge {
                kind: e.kind,
                src: e.src,
                dst: e.dst,
                directed: e.directed,
            })
            .collect(),
        candidates: g.candidates.into_iter().map(EntityId::drug).collect(),
    };
    graph.validate()?;
    Ok(graph)
}

pub fn export_graph(
    graph: &ReasoningGraph,
    scores: Option<&GraphScores>,
    format: ExportFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    let text = match format {
        ExportFormat::Dot => to_dot(graph, scores),
        ExportFormat::Json => to_json(graph, scores)?,
    };
    fs::write(path, text)?;
    Ok(())
}

pub fn import_graph(path: impl AsRef<Path>) -> Result<ReasoningGraph> {
    from_json(&fs::read_to_string(path)?)
}
