"""End-to-end smoke test of the Python bindings on a tiny synthetic corpus.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import json
import math
import tempfile
from pathlib import Path

import medkgqa_py as mk


def main():
    corpus = mk.SynthCorpus.generate(n_drugs=30, n_proteins=80, n_samples=30, candidates=4, seed=5)
    kb = corpus.kb
    samples = corpus.samples
    assert len(samples) == 30
    assert kb.num_triplets > 0 and kb.num_pathways > 0
    s = samples[0]
    assert s.answer in s.candidates
    assert s.query.startswith("interacts_with ")
    assert len(corpus.ground_truth()) == 30

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        corpus.write(tmp / "data")
        kb2 = mk.KnowledgeBase.load(tmp / "data")
        assert kb2.num_triplets == kb.num_triplets
        again = mk.load_samples(tmp / "data" / "samples.json")
        assert [x.id for x in again] == [x.id for x in samples]
        assert mk.samples_to_json(mk.parse_samples(mk.samples_to_json(samples))) == mk.samples_to_json(samples)

        table, losses = mk.EmbeddingTable.train(kb, model="transh", dim=8, epochs=3, seed=1)
        assert table.model == "transh" and table.dim == 8 and len(losses) == 3
        table.save(tmp / "transh.txt")
        loaded = mk.EmbeddingTable.load(tmp / "transh.txt")
        drug = kb.drugs()[0]
        assert loaded.vector("drug", drug) == table.vector("drug", drug)
        report = table.link_prediction(kb, filtered=True)
        assert report["hits_at_1"] <= report["hits_at_3"] <= report["hits_at_10"]

        graph = json.loads(mk.build_graph(s, kb, context=samples))
        assert graph["nodes"] and graph["nodes"][0]["kind"] == "subject"
        assert mk.build_graph(s, kb, format="dot").startswith("digraph")

        config = mk.default_train_config()
        config["epochs"] = 2
        config["model"]["reader"].update(word_dim=8, hidden=8, knowledge_dim=8)
        config["model"]["gat"]["hops"] = 2
        train, dev = samples[:24], samples[24:]
        reader, curve = mk.Reader.train(train, dev, kb, config=config, transh=table)
        assert len(curve) >= 1
        ev = reader.evaluate(dev, kb)
        assert ev["total"] == 6 and 0.0 <= ev["accuracy"] <= 1.0
        scores = reader.scores(dev[0], kb)
        assert all(math.isfinite(v) for _, v in scores)

        reader.save(tmp / "model.json")
        back = mk.Reader.load(tmp / "model.json")
        assert back.evaluate(dev, kb)["accuracy"] == ev["accuracy"]
        assert "digraph" in back.graph(dev[0], kb, format="dot")

        rows = mk.hop_sweep(train, dev, kb, [1, 2], config=config)
        assert [r["hops"] for r in rows] == [1, 2]
        rows = mk.ablate(train, dev, kb, [["merge_edge_types"]], config=config)
        assert [r["arm"] for r in rows] == ["full", "merge_edge_types"]
        cv = mk.cross_validate(samples[:12], kb, 3, config=config)
        assert len(cv["folds"]) == 3

    try:
        mk.SynthCorpus.generate(bogus=1)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown setting accepted")
    try:
        mk.KnowledgeBase.load("/nonexistent")
    except OSError:
        pass
    else:
        raise AssertionError("missing directory accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
