//! Brute-force oracles for graph construction and a strict reader for the
//! DOT subset the exporter writes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use medkgqa::corpus::{tokenize, EntityCatalog, Sample, TokenizedDoc, RELATION};
use medkgqa::graph::{EdgeKind, GraphNode, NodeKind, TypedEdge};
use medkgqa::kb::{EntityId, KnowledgeBase, PathwayPair, Triplet};
use rand::seq::IndexedRandom;
use rand::Rng;

use super::rng;

pub struct Instance {
    pub sample: Sample,
    pub docs: Vec<TokenizedDoc>,
    pub kb: KnowledgeBase,
}

/// Random KB over at most 30 proteins and 8 drugs, plus a sample whose
/// supports mention a random subset of them.
pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n_p = r.random_range(2..=30);
    let prot = |i: usize| format!("P{i}");
    let drug = |i: usize| format!("D{i}");
    let mut kb = KnowledgeBase::new();
    for _ in 0..r.random_range(1..40) {
        kb.add_triplet(Triplet::new(&prot(r.random_range(0..n_p)), "act", &drug(r.random_range(0..8))));
    }
    for _ in 0..r.random_range(0..50) {
        let (a, b) = (r.random_range(0..n_p), r.random_range(0..n_p));
        if a != b {
            kb.add_pathway(PathwayPair::new(&prot(a), &prot(b)).unwrap());
        }
    }
    let subject = EntityId::drug(drug(0));
    let candidates: Vec<EntityId> = (1..r.random_range(3..8)).map(|i| EntityId::drug(drug(i))).collect();
    let words: Vec<String> = (0..n_p)
        .map(prot)
        .chain((0..8).map(drug))
        .chain(["binds", "with", "."].map(String::from))
        .collect();
    let supports: Vec<String> = (0..r.random_range(1..4))
        .map(|_| {
            (0..r.random_range(0..25))
                .map(|_| words.choose(&mut r).unwrap().as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let sample = Sample {
        id: format!("r{seed}"),
        subject,
        relation: RELATION.into(),
        answer: Some(candidates[0].clone()),
        candidates,
        supports,
    };
    let catalog = EntityCatalog::build(&kb, std::slice::from_ref(&sample));
    let docs = sample.supports.iter().map(|d| tokenize(d, &catalog)).collect();
    Instance { sample, docs, kb }
}

/// BFS over raw rows: targets of the subject present in text, then
/// undirected pathway neighbors present in text.
pub fn oracle_selection(kb: &KnowledgeBase, subject: &str, in_text: &BTreeSet<String>) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<String> = kb
        .triplets()
        .iter()
        .filter(|t| t.drug.accession == subject && in_text.contains(&t.protein.accession))
        .map(|t| t.protein.accession.clone())
        .collect();
    while let Some(p) = queue.pop_front() {
        if !seen.insert(p.clone()) {
            continue;
        }
        for pair in kb.pathways() {
            for (a, b) in [(&pair.from, &pair.to), (&pair.to, &pair.from)] {
                if a.accession == p && in_text.contains(&b.accession) && !seen.contains(&b.accession) {
                    queue.push_back(b.accession.clone());
                }
            }
        }
    }
    seen
}

/// Rule-by-rule check of every ordered node pair.
pub fn oracle_edges(nodes: &[GraphNode], subject: &EntityId, kb: &KnowledgeBase) -> BTreeSet<(EdgeKind, usize, usize)> {
    let mut out = BTreeSet::new();
    for (i, a) in nodes.iter().enumerate() {
        for (j, b) in nodes.iter().enumerate() {
            if i == j {
                continue;
            }
            match (a.kind, b.kind) {
                (NodeKind::Subject, NodeKind::Reasoning) if kb.is_target(&subject.accession, &b.entity.accession) => {
                    out.insert((EdgeKind::Sub2Rea, i, j));
                }
                (NodeKind::Reasoning, NodeKind::Reasoning)
                    if i < j
                        && (kb.has_pathway(&a.entity.accession, &b.entity.accession)
                            || kb.has_pathway(&b.entity.accession, &a.entity.accession)) =>
                {
                    out.insert((EdgeKind::Rea2Rea, i, j));
                }
                (NodeKind::Reasoning, NodeKind::Mention) if kb.is_target(&b.entity.accession, &a.entity.accession) => {
                    out.insert((EdgeKind::Rea2Men, i, j));
                }
                (NodeKind::Mention, NodeKind::Candidate) if a.entity == b.entity => {
                    out.insert((EdgeKind::Men2Can, i, j));
                }
                _ => {}
            }
        }
    }
    out
}

pub fn edge_key(e: &TypedEdge) -> (EdgeKind, usize, usize) {
    if e.kind == EdgeKind::Rea2Rea {
        (e.kind, e.src.min(e.dst), e.src.max(e.dst))
    } else {
        (e.kind, e.src, e.dst)
    }
}

pub struct DotNode {
    pub attrs: BTreeMap<String, String>,
}

pub struct DotGraph {
    pub nodes: Vec<DotNode>,
    pub edges: Vec<(String, String, BTreeMap<String, String>)>,
}

/// Parses `key=value` lists where values are bare words or quoted strings.
pub fn parse_attrs(s: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut rest = s.trim();
    while !rest.is_empty() {
        let eq = rest.find('=').expect("attribute needs '='");
        let key = rest[..eq].trim().to_string();
        rest = rest[eq + 1..].trim_start();
        let value;
        if let Some(q) = rest.strip_prefix('"') {
            let mut end = 0;
            let bytes = q.as_bytes();
            while bytes[end] != b'"' {
                end += if bytes[end] == b'\\' { 2 } else { 1 };
            }
            value = q[..end].to_string();
            rest = &q[end + 1..];
        } else {
            let end = rest.find(',').unwrap_or(rest.len());
            value = rest[..end].trim().to_string();
            rest = &rest[end..];
        }
        out.insert(key, value);
        rest = rest.trim_start().trim_start_matches(',').trim_start();
    }
    out
}

/// Accepts only the subset of DOT the exporter writes, asserting the
/// grammar along the way.
pub fn parse_dot(text: &str) -> DotGraph {
    let mut lines = text.lines();
    assert_eq!(lines.next().map(str::trim), Some("digraph reasoning {"));
    let mut g = DotGraph {
        nodes: vec![],
        edges: vec![],
    };
    let mut closed = false;
    for line in lines {
        let line = line.trim();
        if line == "}" {
            closed = true;
            continue;
        }
        assert!(!closed, "content after closing brace");
        let body = line.strip_suffix(';').expect("statements end with ';'");
        let open = body.find('[').expect("attribute list");
        assert!(body.ends_with(']'));
        let head = body[..open].trim();
        let attrs = parse_attrs(&body[open + 1..body.len() - 1]);
        if head == "node" {
            continue;
        }
        if let Some((a, b)) = head.split_once("->") {
            g.edges.push((a.trim().to_string(), b.trim().to_string(), attrs));
        } else {
            assert_eq!(head, format!("n{}", g.nodes.len()));
            g.nodes.push(DotNode { attrs });
        }
    }
    assert!(closed);
    for (a, b, _) in &g.edges {
        for id in [a, b] {
            let k: usize = id.strip_prefix('n').unwrap().parse().unwrap();
            assert!(k < g.nodes.len());
        }
    }
    g
}
