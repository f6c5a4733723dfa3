use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medkgqa::corpus::load_samples;
use medkgqa::graph::import_graph;
use medkgqa::kg_embed::EmbeddingTable;
use serde_json::Value;
use tempfile::TempDir;

const SPEC: &str = "n_drugs = 30\nn_proteins = 80\nn_samples = 30\ncandidates = 4\n";
const SMALL: [&str; 8] = ["--epochs", "2", "--hidden", "8", "--word-dim", "8", "--knowledge-dim", "4"];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_medkgqa"));
    c.env_remove("MEDKG_SEED");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    run(args, cwd).status.code().expect("exited normally")
}

fn synth(dir: &Path, out: &str, seed: &str) -> PathBuf {
    fs::write(dir.join("spec.toml"), SPEC).unwrap();
    ok(&["synth", "--spec", "spec.toml", "--out", out, "--seed", seed], dir);
    dir.join(out)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_corpus_and_manifest() {
    let t = TempDir::new().unwrap();
    let data = synth(t.path(), "data", "3");
    for f in ["samples.json", "triplets.tsv", "pathways.tsv", "ground_truth.json", "manifest.json"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    assert_eq!(load_samples(data.join("samples.json")).unwrap().len(), 30);
    let m = json(&data.join("manifest.json"));
    assert_eq!(m["subcommand"], "synth");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn synth_same_seed_same_bytes() {
    let t = TempDir::new().unwrap();
    let a = synth(t.path(), "a", "5");
    let b = synth(t.path(), "b", "5");
    let c = synth(t.path(), "c", "6");
    for f in ["samples.json", "triplets.tsv", "pathways.tsv", "ground_truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("samples.json")).unwrap(), fs::read(c.join("samples.json")).unwrap());
}

#[test]
fn seed_from_environment_and_config() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("spec.toml"), SPEC).unwrap();
    let env_run = bin()
        .args(["synth", "--spec", "spec.toml", "--out", "env"])
        .env("MEDKG_SEED", "11")
        .current_dir(t.path())
        .output()
        .unwrap();
    assert!(env_run.status.success());
    assert_eq!(json(&t.path().join("env/manifest.json"))["seed"], 11);

    fs::write(t.path().join("cfg.toml"), "seed = 12\n").unwrap();
    let cfg_run = bin()
        .args(["synth", "--spec", "spec.toml", "--out", "cfg", "--config", "cfg.toml"])
        .env("MEDKG_SEED", "11")
        .current_dir(t.path())
        .output()
        .unwrap();
    assert!(cfg_run.status.success());
    assert_eq!(json(&t.path().join("cfg/manifest.json"))["seed"], 12);

    ok(&["synth", "--spec", "spec.toml", "--out", "flag", "--config", "cfg.toml", "--seed", "13"], t.path());
    assert_eq!(json(&t.path().join("flag/manifest.json"))["seed"], 13);
}

#[test]
fn refuses_to_overwrite_without_force() {
    let t = TempDir::new().unwrap();
    synth(t.path(), "data", "1");
    assert_eq!(code(&["synth", "--spec", "spec.toml", "--out", "data"], t.path()), 2);
    ok(&["synth", "--spec", "spec.toml", "--out", "data", "--force"], t.path());

    ok(&["train-kg", "--kb", "data", "--out", "e.txt", "--epochs", "1", "--dim", "4"], t.path());
    assert_eq!(code(&["train-kg", "--kb", "data", "--out", "e.txt", "--epochs", "1", "--dim", "4"], t.path()), 2);
}

#[test]
fn train_kg_report_and_headers() {
    let t = TempDir::new().unwrap();
    synth(t.path(), "data", "2");
    for model in ["transe", "transh"] {
        let out = format!("{model}.txt");
        let stdout = ok(
            &["train-kg", "--kb", "data", "--out", &out, "--model", model, "--epochs", "2", "--dim", "6"],
            t.path(),
        );
        assert!(stdout.contains("hits@10"));
        let table = EmbeddingTable::import(t.path().join(&out)).unwrap();
        assert_eq!(table.model.as_str(), model);
        assert_eq!(table.dim, 6);
        assert_eq!(table.normals.is_empty(), model == "transe");

        let report = json(&t.path().join(format!("{out}.report.json")));
        assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 2);
        for setting in ["raw", "filtered"] {
            let r = &report[setting];
            for k in ["mrr", "mr", "hits_at_10", "hits_at_3", "hits_at_1"] {
                assert!(r[k].is_number(), "{setting}.{k}");
            }
            let h = |k: &str| r[k].as_f64().unwrap();
            assert!(h("hits_at_1") <= h("hits_at_3") && h("hits_at_3") <= h("hits_at_10"));
        }
        assert!(report["filtered"]["mr"].as_f64().unwrap() <= report["raw"]["mr"].as_f64().unwrap());
        assert!(t.path().join(format!("{out}.manifest.json")).is_file());
    }
    let e = fs::read_to_string(t.path().join("transe.txt")).unwrap();
    let h = fs::read_to_string(t.path().join("transh.txt")).unwrap();
    assert_ne!(e.lines().next(), h.lines().next());
}

#[test]
fn missing_inputs_exit_2() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&["train-kg", "--kb", "nowhere", "--out", "e.txt"], t.path()), 2);
    assert_eq!(code(&["train-reader", "--data", "nowhere", "--out", "r"], t.path()), 2);
    assert_eq!(code(&["synth", "--out", "s", "--config", "missing.toml"], t.path()), 2);
    fs::write(t.path().join("bad.toml"), "unknown_key = 1\n").unwrap();
    assert_eq!(code(&["synth", "--out", "s", "--config", "bad.toml"], t.path()), 2);
}

#[test]
fn build_graph_exports() {
    let t = TempDir::new().unwrap();
    synth(t.path(), "data", "4");
    let id = load_samples(t.path().join("data/samples.json")).unwrap()[0].id.clone();

    ok(&["build-graph", "--data", "data", "--sample", &id, "--out", "g.dot"], t.path());
    assert!(fs::read_to_string(t.path().join("g.dot")).unwrap().starts_with("digraph"));

    ok(&["build-graph", "--data", "data", "--sample", &id, "--out", "g.json", "--format", "json"], t.path());
    let g = import_graph(t.path().join("g.json")).unwrap();
    assert!(!g.nodes.is_empty());

    assert_eq!(code(&["build-graph", "--data", "data", "--sample", "nope", "--out", "x.dot"], t.path()), 2);
    assert_eq!(
        code(&["build-graph", "--data", "data", "--sample", &id, "--out", "y.dot", "--format", "svg"], t.path()),
        2
    );
}

#[test]
fn train_then_eval_and_weighted_graph() {
    let t = TempDir::new().unwrap();
    synth(t.path(), "data", "8");
    let mut args = vec!["train-reader", "--data", "data", "--out", "run", "--hops", "2", "--dev-count", "6"];
    args.extend(SMALL);
    ok(&args, t.path());
    let run_dir = t.path().join("run");
    for f in ["model.json", "train.json", "dev.json", "curve.json", "dev_report.json", "dev_report.txt", "manifest.json"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let curve = json(&run_dir.join("curve.json"));
    assert_eq!(curve["dev_size"], 6);
    let dev_acc = curve["best_dev_accuracy"].as_f64().unwrap();

    ok(&["eval-reader", "--samples", "run/dev.json", "--kb", "data", "--ckpt", "run/model.json", "--out", "ev"], t.path());
    let report = json(&t.path().join("ev/report.json"));
    assert_eq!(report["accuracy"].as_f64().unwrap(), dev_acc);
    assert_eq!(report["total"], 6);

    let id = load_samples(run_dir.join("dev.json")).unwrap()[0].id.clone();
    ok(
        &["build-graph", "--data", "data", "--sample", &id, "--out", "w.dot", "--ckpt", "run/model.json"],
        t.path(),
    );
    let weighted = fs::read_to_string(t.path().join("w.dot")).unwrap();
    ok(&["build-graph", "--data", "data", "--sample", &id, "--out", "p.dot"], t.path());
    let plain = fs::read_to_string(t.path().join("p.dot")).unwrap();
    let edge_lines = |s: &str| s.lines().filter(|l| l.contains(" -> ")).map(str::to_string).collect::<Vec<_>>();
    assert!(!edge_lines(&weighted).is_empty());
    assert!(edge_lines(&weighted).iter().all(|l| l.contains("attention=") && l.contains("penwidth=")));
    assert!(edge_lines(&plain).iter().all(|l| !l.contains("attention=")));
}

#[test]
fn reader_uses_embedding_dimension() {
    let t = TempDir::new().unwrap();
    synth(t.path(), "data", "9");
    ok(&["train-kg", "--kb", "data", "--out", "e.txt", "--epochs", "1", "--dim", "6"], t.path());
    ok(
        &["train-reader", "--data", "data", "--transe", "e.txt", "--out", "r", "--epochs", "1", "--hidden", "8", "--word-dim", "8"],
        t.path(),
    );
    assert_eq!(json(&t.path().join("r/manifest.json"))["config"]["model"]["reader"]["knowledge_dim"], 6);
    let mut args = vec!["train-reader", "--data", "data", "--transe", "e.txt", "--out", "r2"];
    args.extend(SMALL);
    assert_eq!(code(&args, t.path()), 2);
}

#[test]
fn sweep_has_one_row_per_hop_count() {
    let t = TempDir::new().unwrap();
    synth(t.path(), "data", "6");
    let mut args = vec!["sweep", "--data", "data", "--out", "sw", "--hops", "1,2,3,4", "--dev-count", "5"];
    args.extend(&SMALL[..6]);
    let stdout = ok(&args, t.path());
    let rows = json(&t.path().join("sw/sweep.json"));
    let hops: Vec<u64> = rows.as_array().unwrap().iter().map(|r| r["hops"].as_u64().unwrap()).collect();
    assert_eq!(hops, [1, 2, 3, 4]);
    assert_eq!(stdout.lines().count(), 6);
}

#[test]
fn ablate_tags_arms() {
    let t = TempDir::new().unwrap();
    synth(t.path(), "data", "7");
    let mut args = vec![
        "ablate",
        "--data",
        "data",
        "--out",
        "ab",
        "--hops",
        "1",
        "--flag",
        "merge_edge_types",
        "--flag",
        "drop_mention_nodes+merge_edge_types",
    ];
    args.extend(&SMALL[..6]);
    ok(&args, t.path());
    let rows = json(&t.path().join("ab/ablation.json"));
    let arms: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["arm"].as_str().unwrap()).collect();
    assert_eq!(arms[0], "full");
    assert_eq!(arms[1], "merge_edge_types");
    assert!(arms[2].contains("merge_edge_types") && arms[2].contains("drop_mention_nodes"));
    assert_eq!(rows[0]["delta"].as_f64().unwrap(), 0.0);

    let bad = ["ablate", "--data", "data", "--out", "ab2", "--flag", "no_graph_reasoning+merge_edge_types"];
    assert_eq!(code(&bad, t.path()), 2);
    assert_eq!(code(&["ablate", "--data", "data", "--out", "ab3", "--flag", "bogus"], t.path()), 2);
}

#[test]
fn cv_keeps_top_folds() {
    let t = TempDir::new().unwrap();
    synth(t.path(), "data", "10");
    let mut args = vec!["cv", "--data", "data", "--out", "cv", "--folds", "4", "--hops", "1"];
    args.extend(&SMALL[..6]);
    ok(&args, t.path());
    let summary = json(&t.path().join("cv/cv.json"));
    assert_eq!(summary["folds"].as_array().unwrap().len(), 4);
    let kept = summary["kept"].as_array().unwrap();
    assert_eq!(kept.len(), 3);
    for k in kept {
        assert!(t.path().join(format!("cv/fold_{}.json", k.as_u64().unwrap())).is_file());
    }
}

#[test]
fn conflicting_or_invalid_flags_exit_2() {
    let t = TempDir::new().unwrap();
    synth(t.path(), "data", "1");
    let conflict = ["train-reader", "--data", "data", "--out", "r", "--dev-count", "3", "--cv-folds", "3"];
    assert_eq!(code(&conflict, t.path()), 2);
    assert_eq!(code(&["train-kg", "--kb", "data", "--out", "e.txt", "--model", "distmult"], t.path()), 2);
    assert_eq!(code(&["train-reader", "--data", "data", "--out", "r", "--ablation", "bogus"], t.path()), 2);
    assert_eq!(code(&["train-reader", "--data", "data", "--out", "r", "--dev-count", "30"], t.path()), 2);
    assert_eq!(code(&["sweep", "--data", "data", "--out", "s", "--hops", "0,2"], t.path()), 2);
}

#[test]
fn help_lists_defaults() {
    let t = TempDir::new().unwrap();
    let help = ok(&["train-reader", "--help"], t.path());
    for s in ["--hops", "[default: 5]", "--lr", "[default: 0.001]", "--max-reasoning-nodes", "[default: 800]"] {
        assert!(help.contains(s), "missing {s} in help");
    }
    let kg = ok(&["train-kg", "--help"], t.path());
    assert!(kg.contains("[default: 200]") && kg.contains("[default: transe]"));
    let sweep = ok(&["sweep", "--help"], t.path());
    assert!(sweep.contains("[default: 3,4,5,6]"));
}
