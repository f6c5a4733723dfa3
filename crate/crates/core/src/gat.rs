//! Multi-relation graph attention with question-aware and general gating,
//! and the candidate scorer.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{EdgeKind, ReasoningGraph};
use crate::nn::{add_bias, blend, ones, xavier, BiLstm, Mlp};

/// Message directions, one weight slot each. Undirected kinds own two.
pub const RELATION_SLOTS: [&str; 6] = [
    "sub2rea",
    "rea2rea.fwd",
    "rea2rea.bwd",
    "rea2men",
    "men2can.fwd",
    "men2can.bwd",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub heads: usize,
    pub hops: usize,
    pub leaky_slope: f64,
    pub activation: Activation,
    /// Every message direction shares one weight slot.
    pub merge_edge_types: bool,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            hops: 5,
            leaky_slope: 0.2,
            activation: Activation::Elu,
            merge_edge_types: false,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Contract("at least one attention head is needed".into()));
        }
        if self.hops == 0 {
            return Err(Error::Contract("at least one hop is needed".into()));
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        if self.merge_edge_types {
            1
        } else {
            RELATION_SLOTS.len()
        }
    }
}

/// Messages `src → dst` of one slot; `edge` is the originating graph edge.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotEdges {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge: Vec<usize>,
}

impl SlotEdges {
    fn push(&mut self, src: usize, dst: usize, edge: usize) {
        self.src.push(src);
        self.dst.push(dst);
        self.edge.push(edge);
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelationEdges {
    pub nodes: usize,
    pub slots: Vec<SlotEdges>,
}

impl RelationEdges {
    pub fn from_graph(graph: &ReasoningGraph, merge: bool) -> Self {
        let n_slots = if merge { 1 } else { RELATION_SLOTS.len() };
        let mut slots = vec![SlotEdges::default(); n_slots];
        let slot = |s: usize| if merge { 0 } else { s };
        for (k, e) in graph.edges.iter().enumerate() {
            match e.kind {
                EdgeKind::Sub2Rea => slots[slot(0)].push(e.src, e.dst, k),
                EdgeKind::Rea2Rea => {
                    slots[slot(1)].push(e.src, e.dst, k);
                    slots[slot(2)].push(e.dst, e.src, k);
                }
                EdgeKind::Rea2Men => slots[slot(3)].push(e.src, e.dst, k),
                EdgeKind::Men2Can => {
                    slots[slot(4)].push(e.src, e.dst, k);
                    slots[slot(5)].push(e.dst, e.src, k);
                }
            }
        }
        Self {
            nodes: graph.nodes.len(),
            slots,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationParams {
    /// `D × D` transform.
    pub w: ParamId,
    /// `2D × 1`: receiver half then neighbor half.
    pub a: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionGate {
    pub encoder: BiLstm,
    /// `h × D` projection of the gate's question states.
    pub proj: ParamId,
    /// `2D × 1` scorer over `[u_i ‖ H_q,j]`.
    pub wq: ParamId,
    pub bq: ParamId,
    pub ws: ParamId,
    pub bs: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralGate {
    pub wg: ParamId,
    pub bg: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatParams {
    /// `[slot][head]`.
    pub relations: Vec<Vec<RelationParams>>,
    pub question_gate: QuestionGate,
    pub general_gate: GeneralGate,
    pub f_can: Mlp,
    pub f_men: Mlp,
    pub node_dim: usize,
}

impl GatParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &GatConfig,
        word_dim: usize,
        hidden: usize,
        node_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = node_dim;
        let mut relations = Vec::new();
        for s in 0..config.slots() {
            let name = if config.merge_edge_types { "merged" } else { RELATION_SLOTS[s] };
            let heads = (0..config.heads)
                .map(|k| RelationParams {
                    w: store.add(format!("gat.{name}.{k}.w"), xavier(d, d, rng)),
                    a: store.add(format!("gat.{name}.{k}.a"), xavier(2 * d, 1, rng)),
                })
                .collect();
            relations.push(heads);
        }
        let question_gate = QuestionGate {
            encoder: BiLstm::new(store, "gate.question", word_dim, hidden, rng)?,
            proj: store.add("gate.question.proj", xavier(hidden, d, rng)),
            wq: store.add("gate.question.wq", xavier(2 * d, 1, rng)),
            bq: store.add("gate.question.bq", Tensor::zeros(&[1, 1])),
            ws: store.add("gate.question.ws", xavier(2 * d, d, rng)),
            bs: store.add("gate.question.bs", Tensor::zeros(&[1, d])),
        };
        let general_gate = GeneralGate {
            wg: store.add("gate.general.wg", xavier(2 * d, d, rng)),
            bg: store.add("gate.general.bg", Tensor::zeros(&[1, d])),
        };
        Ok(Self {
            relations,
            question_gate,
            general_gate,
            f_can: Mlp::new(store, "out.can", d, hidden, rng),
            f_men: Mlp::new(store, "out.men", d, hidden, rng),
            node_dim: d,
        })
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Normalized attention of one receiver over its neighbors under one
/// relation and head, on plain vectors.
pub fn attention_coefficients(receiver: &[f64], neighbors: &[&[f64]], w: &Tensor, a: &Tensor, slope: f64) -> Result<Vec<f64>> {
    let d = w.rows();
    if receiver.len() != d || a.numel() != 2 * d || neighbors.iter().any(|n| n.len() != d) {
        return Err(Error::Shape {
            op: "attention_coefficients",
            lhs: vec![receiver.len()],
            rhs: w.shape().to_vec(),
        });
    }
    let project = |u: &[f64]| -> Vec<f64> {
        (0..w.cols())
            .map(|c| (0..d).map(|r| u[r] * w.at(r, c)).sum())
            .collect()
    };
    let wi = project(receiver);
    let ad = a.data();
    let si: f64 = wi.iter().zip(&ad[..d]).map(|(x, y)| x * y).sum();
    let e: Vec<f64> = neighbors
        .iter()
        .map(|n| {
            let wj = project(n);
            leaky(si + wj.iter().zip(&ad[d..]).map(|(x, y)| x * y).sum::<f64>(), slope)
        })
        .collect();
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = e.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    Ok(ex.into_iter().map(|x| x / z).collect())
}

/// Attention values per `[slot][head]`, aligned with [`SlotEdges`].
#[derive(Clone, Debug, Default)]
pub struct AttentionMaps {
    pub slots: Vec<Vec<Arc<Tensor>>>,
}

impl AttentionMaps {
    /// Mean attention per graph edge over heads and directions.
    pub fn edge_weights(&self, rels: &RelationEdges, n_edges: usize) -> Vec<f64> {
        let mut sum = vec![0.0; n_edges];
        let mut cnt = vec![0usize; n_edges];
        for (slot, heads) in rels.slots.iter().zip(&self.slots) {
            for alpha in heads {
                for (i, &e) in slot.edge.iter().enumerate() {
                    sum[e] += alpha.data()[i];
                    cnt[e] += 1;
                }
            }
        }
        sum.iter().zip(&cnt).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
    }
}

/// One hop of relation-specific attention messages: per head, the sum over
/// slots of neighbor-averaged attended transforms, activated, then averaged
/// over heads.
pub fn relational_aggregate<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &GatParams,
    config: &GatConfig,
    u: Var<'t>,
    rels: &RelationEdges,
) -> Result<(Var<'t>, AttentionMaps)> {
    let n = u.shape()[0];
    let d = params.node_dim;
    if rels.slots.len() != params.relations.len() {
        return Err(Error::Contract(format!(
            "{} relation slots in the graph, {} in the parameters",
            rels.slots.len(),
            params.relations.len()
        )));
    }
    let mut maps = AttentionMaps {
        slots: vec![Vec::new(); rels.slots.len()],
    };
    let mut heads = Vec::with_capacity(config.heads);
    for k in 0..config.heads {
        let mut total: Option<Var<'t>> = None;
        for (s, slot) in rels.slots.iter().enumerate() {
            if slot.is_empty() {
                continue;
            }
            let rp = &params.relations[s][k];
            let w = tape.param(store, rp.w);
            let a = tape.param(store, rp.a);
            let wa_recv = w.matmul(a.slice_rows(0, d)?)?;
            let wa_nbr = w.matmul(a.slice_rows(d, 2 * d)?)?;
            let src_rows = u.gather_rows(&slot.src)?;
            let e = u
                .gather_rows(&slot.dst)?
                .matmul(wa_recv)?
                .add(src_rows.matmul(wa_nbr)?)?
                .leaky_relu(config.leaky_slope);
            let alpha = e.segment_softmax(&slot.dst)?;
            maps.slots[s].push(alpha.value());
            let msg = src_rows.matmul(w)?.scale_rows(alpha)?.segment_mean(&slot.dst, n)?;
            total = Some(match total {
                Some(t) => t.add(msg)?,
                None => msg,
            });
        }
        let total = total.unwrap_or_else(|| tape.constant(Tensor::zeros(&[n, d])));
        heads.push(match config.activation {
            Activation::Elu => total.elu(),
            Activation::Identity => total,
        });
    }
    let mut g = heads[0];
    for h in &heads[1..] {
        g = g.add(*h)?;
    }
    Ok((g.scale(1.0 / config.heads as f64), maps))
}

/// Gate-side question states projected to node size: `l_q × D`.
pub fn gate_question<'t>(tape: &'t Tape, store: &ParamStore, gate: &QuestionGate, question_words: Var<'t>) -> Result<Var<'t>> {
    gate.encoder
        .encode(tape, store, question_words)?
        .matmul(tape.param(store, gate.proj))
}

/// Question-aware gate: each node attends over question positions with
/// sigmoid-scored affinities, then blends `tanh(q)` into its state.
pub fn question_gate<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    gate: &QuestionGate,
    u: Var<'t>,
    question: Var<'t>,
) -> Result<Var<'t>> {
    let n = u.shape()[0];
    let l_q = question.shape()[0];
    let d = u.shape()[1];
    let wq = tape.param(store, gate.wq);
    let by_node = u.matmul(wq.slice_rows(0, d)?)?;
    let by_pos = question.matmul(wq.slice_rows(d, 2 * d)?)?;
    let logits = by_node
        .matmul(ones(tape, 1, l_q))?
        .add(ones(tape, n, 1).matmul(by_pos.transpose()?)?)?
        .add(tape.param(store, gate.bq))?;
    let alpha = logits.sigmoid().softmax(1)?;
    let q = alpha.matmul(question)?;
    let beta = add_bias(
        Var::concat(&[q, u], 1)?.matmul(tape.param(store, gate.ws))?,
        tape.param(store, gate.bs),
    )?
    .sigmoid();
    blend(beta, q.tanh(), u)
}

/// `w = σ([ũ ‖ g] W_g + b)`, `u' = w ⊙ tanh(ũ) + (1 − w) ⊙ u`.
pub fn general_gate<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    gate: &GeneralGate,
    u: Var<'t>,
    u_tilde: Var<'t>,
    g: Var<'t>,
) -> Result<Var<'t>> {
    let w = add_bias(
        Var::concat(&[u_tilde, g], 1)?.matmul(tape.param(store, gate.wg))?,
        tape.param(store, gate.bg),
    )?
    .sigmoid();
    blend(w, u_tilde.tanh(), u)
}

/// `hops` rounds of aggregate, question gate, general gate with shared
/// parameters. Attention maps are those of the last round.
pub fn forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &GatParams,
    config: &GatConfig,
    u0: Var<'t>,
    rels: &RelationEdges,
    question: Var<'t>,
) -> Result<(Var<'t>, AttentionMaps)> {
    config.validate()?;
    if u0.shape()[0] == 0 {
        return Ok((u0, AttentionMaps::default()));
    }
    let mut u = u0;
    let mut maps = AttentionMaps::default();
    for _ in 0..config.hops {
        let (g, m) = relational_aggregate(tape, store, params, config, u, rels)?;
        let u_tilde = question_gate(tape, store, &params.question_gate, u, question)?;
        u = general_gate(tape, store, &params.general_gate, u, u_tilde, g)?;
        maps = m;
    }
    Ok((u, maps))
}

/// `1 × |C|` scores: `f_can` of each candidate row plus the best `f_men`
/// over that candidate's mention rows (if any). `owner[m]` is the candidate
/// index of mention row `m`.
pub fn score_candidates<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &GatParams,
    candidates: Var<'t>,
    mentions: Option<Var<'t>>,
    owner: &[usize],
) -> Result<Var<'t>> {
    let n_c = candidates.shape()[0];
    let can = params.f_can.forward(tape, store, candidates)?;
    let men = match mentions {
        Some(m) if !owner.is_empty() => Some(params.f_men.forward(tape, store, m)?),
        _ => None,
    };
    let mut cols = Vec::with_capacity(n_c);
    for c in 0..n_c {
        let mut s = can.row(c)?;
        if let Some(men) = men {
            let rows: Vec<usize> = (0..owner.len()).filter(|&m| owner[m] == c).collect();
            if !rows.is_empty() {
                s = s.add(men.gather_rows(&rows)?.max()?)?;
            }
        }
        cols.push(s);
    }
    Var::concat(&cols, 1)
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn single_neighbor_gets_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let a = Tensor::randn(&[6, 1], 1.0, &mut rng);
        let al = attention_coefficients(&[1.0, 2.0, 3.0], &[&[0.5, 0.1, 0.0]], &w, &a, 0.2).unwrap();
        assert_eq!(al, [1.0]);
    }

    #[test]
    fn pass_through_with_identity() {
        // one edge j -> i, W = I, identity activation, one head: g_i = u_j
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let config = GatConfig {
            heads: 1,
            hops: 1,
            activation: Activation::Identity,
            merge_edge_types: true,
            ..GatConfig::default()
        };
        let params = GatParams::new(&mut store, &config, 2, 2, 4, &mut rng).unwrap();
        store.set(params.relations[0][0].w, Tensor::identity(4)).unwrap();
        let rels = RelationEdges {
            nodes: 2,
            slots: vec![SlotEdges {
                src: vec![1],
                dst: vec![0],
                edge: vec![0],
            }],
        };
        let tape = Tape::new();
        let u = tape.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
        let (g, _) = relational_aggregate(&tape, &store, &params, &config, u, &rels).unwrap();
        assert_eq!(g.value().row_slice(0), u.value().row_slice(1));
        assert!(g.value().row_slice(1).iter().all(|&x| x == 0.0));
    }
}
