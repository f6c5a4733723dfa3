//! Drug–protein action triplets and protein pathway pairs.
//!
//! Two source-target lookups drive protein selection during graph
//! construction: [`KnowledgeBase::targets_of`] (which proteins a drug acts
//! on) and [`KnowledgeBase::interactors_of`] (which proteins share a pathway
//! pair with a protein).
//!
//! Both files are tab-separated with optional `#` comment lines:
//!
//! ```text
//! # triplets.tsv
//! Q9NY46    inhibitor    DB00243
//! # pathways.tsv
//! P1    P2
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRIPLETS_FILE: &str = "triplets.tsv";
pub const PATHWAYS_FILE: &str = "pathways.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Drug,
    Protein,
}

/// An accession number tagged with its kind. Accessions are opaque.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId {
    pub kind: EntityKind,
    pub accession: String,
}

impl EntityId {
    pub fn drug(accession: impl Into<String>) -> Self {
        Self {
            kind: EntityKind::Drug,
            accession: accession.into(),
        }
    }

    pub fn protein(accession: impl Into<String>) -> Self {
        Self {
            kind: EntityKind::Protein,
            accession: accession.into(),
        }
    }

    pub fn is_drug(&self) -> bool {
        self.kind == EntityKind::Drug
    }

    pub fn is_protein(&self) -> bool {
        self.kind == EntityKind::Protein
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.accession)
    }
}

/// Name of a drug–protein action ("inhibitor", "agonist", ...).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionLabel(pub String);

impl ActionLabel {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One `(protein, action, drug)` fact.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub protein: EntityId,
    pub action: ActionLabel,
    pub drug: EntityId,
}

impl Triplet {
    pub fn new(protein: &str, action: &str, drug: &str) -> Self {
        Self {
            protein: EntityId::protein(protein),
            action: ActionLabel::new(action),
            drug: EntityId::drug(drug),
        }
    }
}

/// Directed protein pair from a pathway database.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PathwayPair {
    pub from: EntityId,
    pub to: EntityId,
}

impl PathwayPair {
    pub fn new(from: &str, to: &str) -> Result<Self> {
        if from == to {
            return Err(Error::Format(format!("pathway self-loop on {from}")));
        }
        Ok(Self {
            from: EntityId::protein(from),
            to: EntityId::protein(to),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    /// Data rows read (comments and blank lines excluded).
    pub rows: usize,
    pub duplicates: usize,
    pub self_loops_skipped: usize,
}

#[derive(Clone, Debug, Default)]
pub struct KnowledgeBase {
    triplets: BTreeSet<Triplet>,
    pathways: BTreeSet<PathwayPair>,
    targets: BTreeMap<String, BTreeSet<String>>,
    successors: BTreeMap<String, BTreeSet<String>>,
    predecessors: BTreeMap<String, BTreeSet<String>>,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn split_fields<'a>(path: &Path, line_no: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != n {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {n} tab-separated columns, found {}", fields.len()),
        ));
    }
    if let Some(i) = fields.iter().position(|f| f.trim().is_empty()) {
        return Err(parse_err(path, line_no, format!("column {} is empty", i + 1)));
    }
    Ok(fields.into_iter().map(str::trim).collect())
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(
        triplets: impl IntoIterator<Item = Triplet>,
        pathways: impl IntoIterator<Item = PathwayPair>,
    ) -> Self {
        let mut kb = Self::new();
        for t in triplets {
            kb.add_triplet(t);
        }
        for p in pathways {
            kb.add_pathway(p);
        }
        kb
    }

    /// Returns `false` when the triplet was already present.
    pub fn add_triplet(&mut self, t: Triplet) -> bool {
        self.targets
            .entry(t.drug.accession.clone())
            .or_default()
            .insert(t.protein.accession.clone());
        self.triplets.insert(t)
    }

    /// Returns `false` when the pair was already present.
    pub fn add_pathway(&mut self, p: PathwayPair) -> bool {
        self.successors
            .entry(p.from.accession.clone())
            .or_default()
            .insert(p.to.accession.clone());
        self.predecessors
            .entry(p.to.accession.clone())
            .or_default()
            .insert(p.from.accession.clone());
        self.pathways.insert(p)
    }

    pub fn merge(&mut self, other: KnowledgeBase) {
        for t in other.triplets {
            self.add_triplet(t);
        }
        for p in other.pathways {
            self.add_pathway(p);
        }
    }

    pub fn parse_triplets(text: &str, source: &Path) -> Result<(Self, LoadReport)> {
        let mut kb = Self::new();
        let mut report = LoadReport::default();
        for (line_no, line) in data_lines(text) {
            let f = split_fields(source, line_no, line, 3)?;
            report.rows += 1;
            if !kb.add_triplet(Triplet::new(f[0], f[1], f[2])) {
                report.duplicates += 1;
            }
        }
        Ok((kb, report))
    }

    pub fn parse_pathways(text: &str, source: &Path) -> Result<(Self, LoadReport)> {
        let mut kb = Self::new();
        let mut report = LoadReport::default();
        for (line_no, line) in data_lines(text) {
            let f = split_fields(source, line_no, line, 2)?;
            report.rows += 1;
            match PathwayPair::new(f[0], f[1]) {
                Ok(p) => {
                    if !kb.add_pathway(p) {
                        report.duplicates += 1;
                    }
                }
                Err(_) => {
                    warn!("{}:{line_no}: skipping self-loop pathway {}", source.display(), f[0]);
                    report.self_loops_skipped += 1;
                }
            }
        }
        Ok((kb, report))
    }

    /// Reads a `protein TAB action TAB drug` file.
    pub fn load_triplets(path: impl AsRef<Path>) -> Result<(Self, LoadReport)> {
        let path = path.as_ref();
        Self::parse_triplets(&fs::read_to_string(path)?, path)
    }

    /// Reads a `from TAB to` protein pair file.
    pub fn load_pathways(path: impl AsRef<Path>) -> Result<(Self, LoadReport)> {
        let path = path.as_ref();
        Self::parse_pathways(&fs::read_to_string(path)?, path)
    }

    /// Loads `triplets.tsv` and, when present, `pathways.tsv` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let tpath = dir.join(TRIPLETS_FILE);
        if !tpath.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} not found", tpath.display()),
            )));
        }
        let (mut kb, _) = Self::load_triplets(&tpath)?;
        let ppath = dir.join(PATHWAYS_FILE);
        if ppath.exists() {
            let (pw, _) = Self::load_pathways(&ppath)?;
            kb.merge(pw);
        }
        Ok(kb)
    }

    pub fn triplets_tsv(&self) -> String {
        self.triplets
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.protein, t.action, t.drug))
            .collect()
    }

    pub fn pathways_tsv(&self) -> String {
        self.pathways
            .iter()
            .map(|p| format!("{}\t{}\n", p.from, p.to))
            .collect()
    }

    /// Writes both files in canonical form: sorted, deduplicated, no comments.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let t = dir.join(TRIPLETS_FILE);
        let p = dir.join(PATHWAYS_FILE);
        fs::write(&t, self.triplets_tsv())?;
        fs::write(&p, self.pathways_tsv())?;
        Ok((t, p))
    }

    pub fn triplets(&self) -> &BTreeSet<Triplet> {
        &self.triplets
    }

    pub fn pathways(&self) -> &BTreeSet<PathwayPair> {
        &self.pathways
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty() && self.pathways.is_empty()
    }

    pub fn drugs(&self) -> BTreeSet<EntityId> {
        self.triplets.iter().map(|t| t.drug.clone()).collect()
    }

    /// Proteins appearing in any triplet or pathway pair.
    pub fn proteins(&self) -> BTreeSet<EntityId> {
        self.triplets
            .iter()
            .map(|t| t.protein.clone())
            .chain(self.pathways.iter().flat_map(|p| [p.from.clone(), p.to.clone()]))
            .collect()
    }

    pub fn actions(&self) -> BTreeSet<ActionLabel> {
        self.triplets.iter().map(|t| t.action.clone()).collect()
    }

    /// `F(d)`: proteins that appear with `d` in any triplet. Unknown drugs
    /// have no targets.
    pub fn targets_of(&self, drug: &EntityId) -> Result<BTreeSet<EntityId>> {
        if !drug.is_drug() {
            return Err(Error::Kind(drug.accession.clone()));
        }
        Ok(self
            .targets
            .get(&drug.accession)
            .map(|s| s.iter().map(EntityId::protein).collect())
            .unwrap_or_default())
    }

    /// `G(p)`: pathway neighbours of `p`. The directed query returns only
    /// successors; the undirected one also includes predecessors.
    pub fn interactors_of(&self, protein: &EntityId, directed: bool) -> Result<BTreeSet<EntityId>> {
        if !protein.is_protein() {
            return Err(Error::Kind(protein.accession.clone()));
        }
        let mut out: BTreeSet<EntityId> = self
            .successors
            .get(&protein.accession)
            .into_iter()
            .flatten()
            .map(EntityId::protein)
            .collect();
        if !directed {
            out.extend(
                self.predecessors
                    .get(&protein.accession)
                    .into_iter()
                    .flatten()
                    .map(EntityId::protein),
            );
        }
        Ok(out)
    }

    pub fn is_target(&self, drug: &str, protein: &str) -> bool {
        self.targets.get(drug).is_some_and(|s| s.contains(protein))
    }

    /// Whether a pathway pair links the two proteins in the given direction.
    pub fn has_pathway(&self, from: &str, to: &str) -> bool {
        self.successors.get(from).is_some_and(|s| s.contains(to))
    }
}
