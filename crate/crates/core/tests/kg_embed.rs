mod common;

use std::collections::BTreeSet;

use common::kg::{oracle_rank, random_kb, random_table, random_vec, unit};
use common::rng;
use medkgqa::kb::{EntityId, KnowledgeBase, Triplet};
use medkgqa::kg_embed::{
    eval_link_prediction, eval_link_prediction_on, hinge, score_transe, score_transh, split_triplets, train_embeddings,
    triplet_ranks, CorruptedSide, Corruptor, EmbeddingTable, LinkPredictionReport, TransConfig, TransModel,
};
use medkgqa::Error;

#[test]
fn transh_examples() {
    assert_eq!(score_transh(&[0., 3.], &[0., 0.], &[0., 3.], &[1., 0.]).unwrap(), 0.0);
    assert_eq!(score_transh(&[5., 1.], &[0., 0.], &[9., 1.], &[1., 0.]).unwrap(), 0.0);
    assert!(matches!(
        score_transh(&[5., 1.], &[0., 0.], &[9., 1.], &[1., 1.]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn transh_matches_projection_oracle() {
    let mut r = rng(3);
    for _ in 0..20 {
        let (p, l, d, w) = (random_vec(7, &mut r), random_vec(7, &mut r), random_vec(7, &mut r), unit(7, &mut r));
        let dot = |a: &[f64]| a.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>();
        let (wp, wd) = (dot(&p), dot(&d));
        let mut sq = 0.0;
        for i in 0..7 {
            let diff = (p[i] - wp * w[i]) + l[i] - (d[i] - wd * w[i]);
            sq += diff * diff;
        }
        let got = score_transh(&p, &l, &d, &w).unwrap();
        assert!((got - sq.sqrt()).abs() < 1e-10);
    }
}

#[test]
fn transe_is_translation_covariant() {
    let mut r = rng(4);
    for _ in 0..20 {
        let (p, l, d, c) = (random_vec(5, &mut r), random_vec(5, &mut r), random_vec(5, &mut r), random_vec(5, &mut r));
        let shift = |v: &[f64]| v.iter().zip(&c).map(|(x, y)| x + y).collect::<Vec<_>>();
        let a = score_transe(&p, &l, &d).unwrap();
        let b = score_transe(&shift(&p), &l, &shift(&d)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn hinge_examples() {
    assert_eq!(hinge(1.0, 0.0, 2.0), 0.0);
    assert_eq!(hinge(1.0, 0.7, 0.7), 1.0);
    assert_eq!(hinge(1.0, 0.0, 1.0), 0.0);
}

#[test]
fn epoch_losses_are_non_negative() {
    let kb = KnowledgeBase::from_parts(
        [Triplet::new("P0", "a", "D0"), Triplet::new("P1", "a", "D1")],
        [],
    );
    let config = TransConfig {
        dim: 4,
        epochs: 1,
        lr: 0.0,
        ..TransConfig::default()
    };
    let out = train_embeddings(&kb, &kb.triplets().iter().cloned().collect::<Vec<_>>(), &config, &mut rng(1)).unwrap();
    assert!(out.epoch_losses.iter().all(|&l| l >= 0.0));
}

#[test]
fn corruption_is_balanced() {
    let kb = random_kb(20, 20, 3, 40, 5);
    let corruptor = Corruptor::new(&kb).unwrap();
    let triplets: Vec<Triplet> = kb.triplets().iter().cloned().collect();
    let mut r = rng(6);
    let mut heads = 0usize;
    for k in 0..10_000 {
        let t = &triplets[k % triplets.len()];
        let (neg, side) = corruptor.negative_sample(t, &mut r).unwrap();
        assert_eq!(neg.action, t.action);
        assert!(!kb.triplets().contains(&neg));
        match side {
            CorruptedSide::Head => {
                heads += 1;
                assert_ne!(neg.protein, t.protein);
                assert_eq!(neg.drug, t.drug);
            }
            CorruptedSide::Tail => {
                assert_eq!(neg.protein, t.protein);
                assert_ne!(neg.drug, t.drug);
            }
        }
    }
    let ratio = heads as f64 / 10_000.0;
    assert!((ratio - 0.5).abs() <= 0.05, "head ratio {ratio}");
}

#[test]
fn ranks_match_brute_force() {
    for (seed, model) in [(1, TransModel::TransE), (2, TransModel::TransH)] {
        let kb = random_kb(10, 8, 3, 20, seed);
        let table = random_table(&kb, model, 6, seed + 10);
        let test: Vec<Triplet> = kb.triplets().iter().cloned().collect();
        for filtered in [false, true] {
            let ranks = triplet_ranks(&table, &test, kb.triplets(), filtered).unwrap();
            let known = filtered.then_some(kb.triplets());
            let mut oracle = Vec::new();
            for (t, r) in test.iter().zip(&ranks) {
                let (h, tl) = (oracle_rank(&table, t, true, known), oracle_rank(&table, t, false, known));
                assert_eq!((r.head, r.tail), (h, tl));
                oracle.extend([h, tl]);
            }
            let report = eval_link_prediction(&table, &kb, filtered).unwrap();
            let n = oracle.len() as f64;
            let mrr = oracle.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
            let mr = oracle.iter().sum::<usize>() as f64 / n;
            let hits10 = oracle.iter().filter(|&&r| r <= 10).count() as f64 / n;
            assert!((report.mrr - mrr).abs() < 1e-12);
            assert!((report.mr - mr).abs() < 1e-12);
            assert!((report.hits_at_10 - hits10).abs() < 1e-12);
        }
    }
}

#[test]
fn ties_are_pessimistic() {
    let kb = KnowledgeBase::from_parts([Triplet::new("P0", "a", "D0"), Triplet::new("P1", "a", "D1")], []);
    let mut table = random_table(&kb, TransModel::TransE, 2, 1);
    for v in table.entities.values_mut() {
        *v = vec![0.0, 0.0];
    }
    let test = [Triplet::new("P0", "a", "D0")];
    let ranks = triplet_ranks(&table, &test, kb.triplets(), false).unwrap();
    assert_eq!((ranks[0].head, ranks[0].tail), (2, 2));
}

#[test]
fn filtered_never_worse_per_triplet() {
    let kb = random_kb(12, 10, 2, 50, 8);
    let table = random_table(&kb, TransModel::TransE, 5, 9);
    let test: Vec<Triplet> = kb.triplets().iter().cloned().collect();
    let raw = triplet_ranks(&table, &test, kb.triplets(), false).unwrap();
    let filt = triplet_ranks(&table, &test, kb.triplets(), true).unwrap();
    for (r, f) in raw.iter().zip(&filt) {
        assert!(f.head <= r.head && f.tail <= r.tail);
    }
    let (rr, fr) = (
        LinkPredictionReport::from_ranks(&raw, false),
        LinkPredictionReport::from_ranks(&filt, true),
    );
    assert!(fr.mrr >= rr.mrr && fr.hits_at_10 >= rr.hits_at_10 && fr.mr <= rr.mr);
}

#[test]
fn report_invariants_hold() {
    for seed in 0..5 {
        let kb = random_kb(15, 12, 3, 40, seed);
        let table = random_table(&kb, TransModel::TransH, 4, seed);
        for filtered in [false, true] {
            let r = eval_link_prediction(&table, &kb, filtered).unwrap();
            assert!(r.mrr > 0.0 && r.mrr <= 1.0);
            assert!(r.mr >= 1.0);
            assert!(0.0 <= r.hits_at_1 && r.hits_at_1 <= r.hits_at_3);
            assert!(r.hits_at_3 <= r.hits_at_10 && r.hits_at_10 <= 1.0);
        }
    }
}

#[test]
fn missing_entities_are_listed() {
    let kb = random_kb(3, 3, 1, 3, 1);
    let mut table = random_table(&kb, TransModel::TransE, 3, 1);
    table.entities.remove(&EntityId::drug("D1"));
    let test: Vec<Triplet> = kb.triplets().iter().cloned().collect();
    match eval_link_prediction_on(&table, &test, kb.triplets(), true) {
        Err(Error::MissingEntities(ids)) => assert_eq!(ids, ["D1"]),
        other => panic!("expected missing entities, got {other:?}"),
    }
}

#[test]
fn export_import_is_bitwise() {
    let kb = random_kb(6, 5, 2, 12, 2);
    for model in [TransModel::TransE, TransModel::TransH] {
        let table = random_table(&kb, model, 9, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        table.export(&path).unwrap();
        let back = EmbeddingTable::import(&path).unwrap();
        assert_eq!(back, table);
        for (k, v) in &table.entities {
            let w = &back.entities[k];
            assert!(v.iter().zip(w).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn truncated_file_is_rejected() {
    let kb = random_kb(6, 5, 2, 12, 2);
    let text = random_table(&kb, TransModel::TransH, 4, 3).to_text();
    let lines: Vec<&str> = text.lines().collect();
    let cut = lines[..lines.len() - 2].join("\n");
    assert!(matches!(EmbeddingTable::from_text(&cut), Err(Error::Format(_))));
    // a line cut mid-vector
    let half = &text[..text.len() - 10];
    assert!(EmbeddingTable::from_text(half).is_err());
}

#[test]
fn header_dim_mismatch_is_rejected() {
    let kb = random_kb(4, 4, 1, 6, 2);
    let text = random_table(&kb, TransModel::TransE, 4, 3).to_text();
    let bad = text.replacen("dim=4", "dim=5", 1);
    assert!(matches!(EmbeddingTable::from_text(&bad), Err(Error::Format(_))));
    let bad_version = text.replacen("v1", "v2", 1);
    assert!(matches!(EmbeddingTable::from_text(&bad_version), Err(Error::Format(_))));
}

#[test]
fn header_line_format() {
    let kb = random_kb(4, 3, 2, 6, 2);
    let text = random_table(&kb, TransModel::TransH, 3, 3).to_text();
    assert_eq!(
        text.lines().next().unwrap(),
        "medkg-emb v1 model=transh dim=3 entities=7 relations=2"
    );
}

#[test]
fn trained_normals_are_unit_and_transe_entities_unit() {
    let kb = random_kb(10, 10, 2, 30, 4);
    let triplets: Vec<Triplet> = kb.triplets().iter().cloned().collect();
    for model in [TransModel::TransE, TransModel::TransH] {
        let config = TransConfig {
            model,
            dim: 8,
            epochs: 5,
            batch_size: 8,
            ..TransConfig::default()
        };
        let out = train_embeddings(&kb, &triplets, &config, &mut rng(2)).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for w in out.table.normals.values() {
            assert!((norm(w) - 1.0).abs() < 1e-9);
        }
        if model == TransModel::TransE {
            for v in out.table.entities.values() {
                assert!((norm(v) - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn training_is_deterministic() {
    let kb = random_kb(8, 8, 2, 20, 4);
    let triplets: Vec<Triplet> = kb.triplets().iter().cloned().collect();
    let config = TransConfig {
        dim: 6,
        epochs: 5,
        batch_size: 4,
        ..TransConfig::default()
    };
    let a = train_embeddings(&kb, &triplets, &config, &mut rng(9)).unwrap();
    let b = train_embeddings(&kb, &triplets, &config, &mut rng(9)).unwrap();
    assert_eq!(a.table, b.table);
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

#[test]
fn loss_settles_after_warmup() {
    // 50 entities: 25 proteins and 25 drugs
    let kb = random_kb(25, 25, 3, 60, 11);
    let triplets: Vec<Triplet> = kb.triplets().iter().cloned().collect();
    let config = TransConfig {
        dim: 16,
        epochs: 300,
        batch_size: 16,
        ..TransConfig::default()
    };
    let out = train_embeddings(&kb, &triplets, &config, &mut rng(12)).unwrap();
    let losses = &out.epoch_losses;
    assert!(losses.iter().all(|&l| l >= 0.0));
    let window_mean = |s: usize| losses[s..s + 50].iter().sum::<f64>() / 50.0;
    let scale = losses[0];
    for s in (100..=losses.len() - 100).step_by(10) {
        let (a, b) = (window_mean(s), window_mean(s + 50));
        assert!(b <= a + 0.05 * scale.max(a), "window at {s}: {a} -> {b}");
    }
    assert!(window_mean(losses.len() - 50) < window_mean(0));
}

#[test]
fn split_mode_partitions_triplets() {
    let kb = random_kb(10, 10, 2, 40, 1);
    let (train, test) = split_triplets(&kb, 0.25, &mut rng(1));
    assert_eq!(test.len(), 10);
    assert_eq!(train.len() + test.len(), kb.triplets().len());
    let all: BTreeSet<Triplet> = train.iter().chain(&test).cloned().collect();
    assert_eq!(&all, kb.triplets());
}
