//! Random knowledge bases and embedding tables, plus a brute-force rank
//! oracle.

use std::collections::BTreeSet;

use medkgqa::kb::{EntityKind, KnowledgeBase, Triplet};
use medkgqa::kg_embed::{EmbeddingTable, TransModel};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::rng;

pub fn random_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let v = random_vec(n, rng);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// KB with `n_p` proteins, `n_d` drugs, `n_a` actions and about `n_t`
/// distinct random triplets.
pub fn random_kb(n_p: usize, n_d: usize, n_a: usize, n_t: usize, seed: u64) -> KnowledgeBase {
    let mut r = rng(seed);
    let mut kb = KnowledgeBase::new();
    // every entity appears at least once
    for i in 0..n_p.max(n_d) {
        kb.add_triplet(Triplet::new(
            &format!("P{}", i % n_p),
            &format!("a{}", i % n_a),
            &format!("D{}", i % n_d),
        ));
    }
    while kb.triplets().len() < n_t {
        kb.add_triplet(Triplet::new(
            &format!("P{}", r.random_range(0..n_p)),
            &format!("a{}", r.random_range(0..n_a)),
            &format!("D{}", r.random_range(0..n_d)),
        ));
    }
    kb
}

pub fn random_table(kb: &KnowledgeBase, model: TransModel, dim: usize, seed: u64) -> EmbeddingTable {
    let mut r = rng(seed);
    EmbeddingTable {
        model,
        dim,
        entities: kb
            .proteins()
            .into_iter()
            .chain(kb.drugs())
            .map(|e| (e, random_vec(dim, &mut r)))
            .collect(),
        relations: kb.actions().into_iter().map(|a| (a, random_vec(dim, &mut r))).collect(),
        normals: match model {
            TransModel::TransE => Default::default(),
            TransModel::TransH => kb.actions().into_iter().map(|a| (a, unit(dim, &mut r))).collect(),
        },
    }
}

/// Brute force: score every same-kind replacement, sort ascending with the
/// true entity after ties, read off its position.
pub fn oracle_rank(table: &EmbeddingTable, t: &Triplet, head: bool, known: Option<&BTreeSet<Triplet>>) -> usize {
    let kind = if head { EntityKind::Protein } else { EntityKind::Drug };
    let truth = table.score(t).unwrap();
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for e in table.entities.keys().filter(|e| e.kind == kind) {
        let mut c = t.clone();
        if head {
            c.protein = e.clone();
        } else {
            c.drug = e.clone();
        }
        let is_true = c == *t;
        if !is_true && known.is_some_and(|k| k.contains(&c)) {
            continue;
        }
        scored.push((if is_true { truth } else { table.score(&c).unwrap() }, is_true));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.iter().position(|s| s.1).unwrap() + 1
}
