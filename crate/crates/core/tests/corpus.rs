mod common;

use std::collections::{BTreeSet, VecDeque};

use common::rng;
use medkgqa::corpus::{
    build_vocab, load_samples, parse_samples, reachable_drugs, samples_to_json, save_samples, synth_generate, tokenize,
    EntityCatalog, Sample, SynthSpec, GROUND_TRUTH_FILE, PAD_ID, RELATION, SAMPLES_FILE, UNK_ID,
};
use medkgqa::kb::{EntityId, KnowledgeBase, PATHWAYS_FILE, TRIPLETS_FILE};
use medkgqa::Error;
use proptest::prelude::*;

fn small_spec(n_samples: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        n_drugs: 60,
        n_proteins: 300,
        n_samples,
        seed,
        ..SynthSpec::default()
    }
}

/// Drugs reachable from `subject` by a linear scan of raw rows: its targets,
/// their undirected pathway closure, then every drug hitting that closure
/// (the subject included).
fn oracle_reachable(kb: &KnowledgeBase, subject: &str) -> BTreeSet<String> {
    let mut seen: BTreeSet<String> = kb
        .triplets()
        .iter()
        .filter(|t| t.drug.accession == subject)
        .map(|t| t.protein.accession.clone())
        .collect();
    let mut queue: VecDeque<String> = seen.iter().cloned().collect();
    while let Some(p) = queue.pop_front() {
        for pair in kb.pathways() {
            let next = if pair.from.accession == p {
                &pair.to.accession
            } else if pair.to.accession == p {
                &pair.from.accession
            } else {
                continue;
            };
            if seen.insert(next.clone()) {
                queue.push_back(next.clone());
            }
        }
    }
    kb.triplets()
        .iter()
        .filter(|t| seen.contains(&t.protein.accession))
        .map(|t| t.drug.accession.clone())
        .collect()
}

#[test]
fn generated_samples_pass_reachability_oracle() {
    let spec = small_spec(100, 3);
    let corpus = synth_generate(&spec, &mut rng(spec.seed)).unwrap();
    assert_eq!(corpus.samples.len(), 100);
    let mut solved = 0;
    for s in &corpus.samples {
        let reach = oracle_reachable(&corpus.kb, &s.subject.accession);
        let answer = s.answer.as_ref().unwrap();
        let others_unreachable = s
            .candidates
            .iter()
            .filter(|c| *c != answer)
            .all(|c| *c != s.subject && !reach.contains(&c.accession));
        if reach.contains(&answer.accession) && others_unreachable {
            solved += 1;
        }
        let lib: BTreeSet<String> = reachable_drugs(&corpus.kb, &s.subject)
            .unwrap()
            .into_iter()
            .map(|d| d.accession)
            .collect();
        assert_eq!(lib, reach);
    }
    assert_eq!(solved, 100);
}

#[test]
fn planted_chains_are_kb_paths() {
    let spec = small_spec(40, 5);
    let corpus = synth_generate(&spec, &mut rng(spec.seed)).unwrap();
    for (s, gt) in corpus.samples.iter().zip(&corpus.ground_truth) {
        assert_eq!(gt.id, s.id);
        let chain = &gt.chain;
        assert_eq!(chain.first().unwrap(), &s.subject.accession);
        assert_eq!(chain.last().unwrap(), &s.answer.as_ref().unwrap().accession);
        let links = chain.len() - 1;
        assert!((spec.chain_len_min..=spec.chain_len_max).contains(&links));
        assert!(corpus.kb.is_target(&chain[0], &chain[1]));
        for w in chain[1..chain.len() - 1].windows(2) {
            assert!(corpus.kb.has_pathway(&w[0], &w[1]));
        }
        assert!(corpus.kb.is_target(&chain[links], &chain[links - 1]));
        let text = s.supports.join(" ");
        for sentence in &gt.chain_sentences {
            assert!(text.contains(sentence.as_str()));
        }
        assert_eq!(s.candidates.len(), spec.candidates);
        assert!((spec.docs_min..=spec.docs_max).contains(&s.supports.len()));
    }
}

#[test]
fn zero_distractor_rate_keeps_only_chain_sentences() {
    let spec = SynthSpec {
        distractor_rate: 0.0,
        ..small_spec(30, 8)
    };
    let corpus = synth_generate(&spec, &mut rng(spec.seed)).unwrap();
    for (s, gt) in corpus.samples.iter().zip(&corpus.ground_truth) {
        let chain_chars: usize = gt.chain_sentences.iter().map(String::len).sum();
        let joins = gt.chain_sentences.len() - s.supports.len();
        let support_chars: usize = s.supports.iter().map(String::len).sum();
        assert_eq!(support_chars, chain_chars + joins);
    }
}

#[test]
fn distractors_raise_sentence_count() {
    let spec = SynthSpec {
        distractor_rate: 0.5,
        ..small_spec(20, 8)
    };
    let corpus = synth_generate(&spec, &mut rng(spec.seed)).unwrap();
    for (s, gt) in corpus.samples.iter().zip(&corpus.ground_truth) {
        let chain_chars: usize = gt.chain_sentences.iter().map(String::len).sum();
        let support_chars: usize = s.supports.iter().map(String::len).sum();
        assert!(support_chars > chain_chars + gt.chain_sentences.len());
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = small_spec(20, 11);
    let a = synth_generate(&spec, &mut rng(spec.seed)).unwrap();
    let b = synth_generate(&spec, &mut rng(spec.seed)).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.kb.triplets_tsv(), b.kb.triplets_tsv());
    let c = synth_generate(&spec, &mut rng(spec.seed + 1)).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn infeasible_candidate_count_errors() {
    let spec = SynthSpec {
        n_drugs: 8,
        candidates: 9,
        ..small_spec(5, 1)
    };
    assert!(synth_generate(&spec, &mut rng(1)).is_err());
}

#[test]
fn written_corpus_reloads() {
    let spec = small_spec(10, 2);
    let corpus = synth_generate(&spec, &mut rng(spec.seed)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();
    for f in [SAMPLES_FILE, GROUND_TRUTH_FILE, TRIPLETS_FILE, PATHWAYS_FILE] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert_eq!(load_samples(dir.path().join(SAMPLES_FILE)).unwrap(), corpus.samples);
    let kb = KnowledgeBase::load_dir(dir.path()).unwrap();
    assert_eq!(kb.triplets(), corpus.kb.triplets());
    assert_eq!(kb.pathways(), corpus.kb.pathways());
}

#[test]
fn sample_json_example() {
    let json = r#"[{"id":"x","query":"interacts_with DB00007","candidates":["DB00007X","DB01"],"answer":"DB01","supports":["a b"]}]"#;
    let s = &parse_samples(json).unwrap()[0];
    assert_eq!(s.subject, EntityId::drug("DB00007"));
    assert_eq!(s.relation, RELATION);
    assert_eq!(s.answer_index(), Some(1));
    let bad = json.replace("interacts_with", "treats");
    assert!(parse_samples(&bad).is_err());
    let not_member = json.replace(r#""answer":"DB01""#, r#""answer":"DB99""#);
    match parse_samples(&not_member) {
        Err(Error::Validation { id, .. }) => assert_eq!(id, "x"),
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn tokenizer_examples() {
    let mut catalog = EntityCatalog::new();
    catalog.insert(&EntityId::drug("DB00007"));
    catalog.insert(&EntityId::protein("P123"));
    let doc = tokenize("DB00007 binds P123 .", &catalog);
    assert_eq!(doc.tokens, ["DB00007", "binds", "P123", "."]);
    assert_eq!(doc.entity_spans.len(), 2);
    assert!(tokenize("db00007 binds", &catalog).entity_spans.is_empty());
    assert!(tokenize("", &catalog).tokens.is_empty());
    let punct = tokenize("(DB00007), then P123.", &catalog);
    assert_eq!(punct.entity_spans.len(), 2);
}

#[test]
fn vocab_examples() {
    let (vocab, emb) = build_vocab(&[], 4, &mut rng(1));
    assert_eq!(vocab.len(), 2);
    assert_eq!(emb.shape(), [2, 4]);
    assert_eq!(vocab.id("anything"), UNK_ID);
    assert_ne!(PAD_ID, UNK_ID);

    let spec = small_spec(5, 1);
    let corpus = synth_generate(&spec, &mut rng(1)).unwrap();
    let (v1, e1) = build_vocab(&corpus.samples, 8, &mut rng(3));
    let (v2, e2) = build_vocab(&corpus.samples, 8, &mut rng(3));
    assert_eq!(v1.tokens(), v2.tokens());
    assert_eq!(e1, e2);
    assert_eq!(v1.hash(), v2.hash());
    for s in &corpus.samples {
        assert!(v1.contains(&s.subject.accession));
        for c in &s.candidates {
            assert!(v1.contains(&c.accession));
        }
    }
    // N(0, 0.1²) rows
    let d = e1.data();
    let var = d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64;
    assert!((var.sqrt() - 0.1).abs() < 0.02, "std {}", var.sqrt());
}

fn arb_sample() -> impl Strategy<Value = Sample> {
    (
        "[a-z0-9_]{1,8}",
        0u32..50,
        prop::collection::btree_set(0u32..50, 2..6),
        prop::collection::vec("[ -~]{0,40}", 0..4),
        any::<bool>(),
    )
        .prop_map(|(id, subj, cands, supports, blind)| {
            let candidates: Vec<EntityId> = cands.iter().map(|c| EntityId::drug(format!("DB{c:05}"))).collect();
            let answer = (!blind).then(|| candidates[0].clone());
            Sample {
                id,
                subject: EntityId::drug(format!("DB{subj:05}")),
                relation: RELATION.to_string(),
                candidates,
                supports,
                answer,
            }
        })
}

proptest! {
    #[test]
    fn samples_json_round_trips(samples in prop::collection::vec(arb_sample(), 0..5)) {
        let json = samples_to_json(&samples).unwrap();
        prop_assert_eq!(parse_samples(&json).unwrap(), samples.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        save_samples(&samples, &path).unwrap();
        prop_assert_eq!(load_samples(&path).unwrap(), samples);
    }

    #[test]
    fn spans_index_emitted_tokens(text in "[A-Za-z0-9 .,;()]{0,80}", ids in prop::collection::vec("[A-Z]{1,2}[0-9]{1,3}", 0..4)) {
        let mut catalog = EntityCatalog::new();
        for id in &ids {
            catalog.insert(&EntityId::protein(id.as_str()));
        }
        let doc = tokenize(&text, &catalog);
        prop_assert_eq!(&doc, &tokenize(&text, &catalog));
        let mut last = 0;
        for span in &doc.entity_spans {
            prop_assert!(span.start >= last && span.start < span.end && span.end <= doc.tokens.len());
            prop_assert_eq!(&doc.tokens[span.start], &span.entity.accession);
            last = span.end;
        }
    }
}
