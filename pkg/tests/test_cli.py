"""End-to-end pipeline through the CLI entry point."""

import json

import numpy as np
import pytest

from hicqa.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def pipeline(tmp_path):
    """synth -> build shared by several tests."""
    corpus = tmp_path / "c.jsonl"
    oracle = tmp_path / "o.json"
    graph = tmp_path / "g.json"
    assert run(
        "synth", "--n-samples", 20, "--qas-min", 2, "--qas-max", 3, "--f", 16,
        "--noise-rate", 0.25, "--seed", 7, "--out", corpus, "--oracle", oracle,
    ) == 0
    assert run("build", "--corpus", corpus, "--alpha", 0.5, "--out", graph) == 0
    return tmp_path, corpus, oracle, graph


def test_synth_rerun_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert run("synth", "--n-samples", 12, "--seed", 3, "--out", out) == 0
    assert a.read_bytes() == b.read_bytes()


def test_validate_ok_and_run_json(pipeline):
    tmp_path, corpus, _, _ = pipeline
    report = tmp_path / "report.json"
    assert run("validate", "--corpus", corpus, "--out", report) == 0
    doc = json.loads(report.read_text())
    assert doc["errors"] == []
    assert (tmp_path / "report.json.run.json").exists()
    run_doc = json.loads((tmp_path / "report.json.run.json").read_text())
    assert run_doc["command"] == "validate" and "resolved" in run_doc


def test_validate_bad_corpus_exit_1(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format":"hicqa-corpus","version":1,"f":4}\n{"sample_id":"s0"}\n')
    assert run("validate", "--corpus", bad) == 1


def test_build_edge_counts_and_hash_stability(pipeline, tmp_path):
    _, corpus, _, graph = pipeline
    from hicqa.graph import load_graph

    g = load_graph(graph)
    per_sample = {}
    for sid, _ in g.nodes["qa"].node_ids:
        per_sample[sid] = per_sample.get(sid, 0) + 1
    assert g.relations["described_by"].n_edges == len(per_sample)
    assert g.relations["supports"].n_edges == sum(per_sample.values())
    assert g.relations["similar"].n_edges == sum(k * (k - 1) for k in per_sample.values())

    graph2 = tmp_path / "g2.json"
    assert run("build", "--corpus", corpus, "--alpha", 0.5, "--out", graph2) == 0
    h1 = json.loads(graph.read_text())["hash"]
    h2 = json.loads(graph2.read_text())["hash"]
    assert h1 == h2


def test_train_score_filter_eval_chain(pipeline):
    tmp_path, corpus, oracle, graph = pipeline
    ckpt = tmp_path / "ckpt.json"
    assert run(
        "train", "--graph", graph, "--out", ckpt, "--epochs", 5, "--d", 16,
        "--heads", 2, "--layers", 1, "--seed", 1, "--precision", "double",
    ) == 0
    assert ckpt.exists() and (tmp_path / "ckpt.json.best.json").exists()
    report_rows = [
        json.loads(line)
        for line in (tmp_path / "ckpt.json.report.jsonl").read_text().splitlines()
    ]
    assert len(report_rows) == 5

    scores = tmp_path / "s.json"
    assert run("score", "--graph", graph, "--method", "hicqa", "--checkpoint", ckpt, "--out", scores) == 0
    sdoc = json.loads(scores.read_text())
    assert len(sdoc["scores"]) == len(sdoc["qa_ids"])

    manifest = tmp_path / "m.json"
    filtered = tmp_path / "filtered.jsonl"
    assert run(
        "filter", "--graph", graph, "--scores", scores, "--ratio", 0.5,
        "--corpus", corpus, "--filtered-corpus", filtered, "--out", manifest,
    ) == 0
    mdoc = json.loads(manifest.read_text())
    import math

    assert len(mdoc["kept_qa_ids"]) == math.ceil(0.5 * len(sdoc["qa_ids"]))
    assert run("validate", "--corpus", filtered) == 0

    metrics = tmp_path / "metrics.json"
    assert run(
        "eval", "--graph", graph, "--scores", scores, "--oracle", oracle,
        "--ratios", "0.25,0.5,0.75", "--out", metrics,
    ) == 0
    mdoc = json.loads(metrics.read_text())
    assert set(mdoc["per_ratio"]) == {"0.25", "0.5", "0.75"}
    assert mdoc["auroc"] is not None


def test_score_baselines_without_checkpoint(pipeline):
    tmp_path, _, _, graph = pipeline
    for method in ("nli", "clip", "nclip"):
        out = tmp_path / f"{method}.json"
        assert run("score", "--graph", graph, "--method", method, "--out", out) == 0
        assert json.loads(out.read_text())["method"] == method


def test_score_hicqa_requires_checkpoint(pipeline):
    tmp_path, _, _, graph = pipeline
    assert run("score", "--graph", graph, "--method", "hicqa", "--out", tmp_path / "x.json") == 1


def test_ablation_flags_reach_graph(pipeline):
    tmp_path, corpus, _, _ = pipeline
    from hicqa.graph import load_graph

    g_path = tmp_path / "g_nt.json"
    assert run("build", "--corpus", corpus, "--no-clip-token", "--out", g_path) == 0
    g = load_graph(g_path)
    assert g.flags["no_clip_token"] is True
    assert np.all(g.nodes["qa"].features[:, g.f] == 0.0)

    g_path2 = tmp_path / "g_nn.json"
    assert run("build", "--corpus", corpus, "--no-nli", "--out", g_path2) == 0
    g2 = load_graph(g_path2)
    assert np.all(g2.relations["supports"].attr == 1.0)


def test_unknown_flag_exit_1(capsys):
    assert run("synth", "--bogus") == 1


def test_bad_ratio_exit_1(pipeline, tmp_path):
    tmp_path, _, _, graph = pipeline
    scores = tmp_path / "s0.json"
    assert run("score", "--graph", graph, "--method", "nli", "--out", scores) == 0
    assert run("filter", "--graph", graph, "--scores", scores, "--ratio", 0, "--out", tmp_path / "m.json") == 1


def test_divergence_exit_3(pipeline):
    tmp_path, _, _, graph = pipeline
    assert run(
        "train", "--graph", graph, "--out", tmp_path / "div.json", "--epochs", 30,
        "--d", 8, "--heads", 2, "--layers", 1, "--lr", "1e18", "--optimizer", "sgd",
    ) == 3


def test_gradcheck_subcommand(tmp_path):
    out = tmp_path / "gc.json"
    code = run(
        "gradcheck", "--f", 3, "--d", 8, "--heads", 2, "--layers", 1, "--out", out
    )
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["ok"] and doc["max_rel_error_double"] < 1e-5
