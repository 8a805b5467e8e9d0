"""Graph construction: consistency scores, edge combinatorics, weak
labels, determinism, and serialization."""

import numpy as np
import pytest

from conftest import random_corpus
from hicqa.graph import (
    build_graph,
    cosine_consistency,
    graph_hash,
    keep_score,
    load_graph,
    nonneg_cosine,
    save_graph,
)


def _vec_at_cos(c, f=4):
    """Unit vector at cosine c to e0."""
    v = np.zeros(f)
    v[0], v[1] = c, np.sqrt(1 - c * c)
    return v


E0 = np.array([1.0, 0.0, 0.0, 0.0])


class TestConsistencyScores:
    def test_parallel(self):
        assert cosine_consistency(E0, E0) == 1.0

    def test_orthogonal(self):
        assert cosine_consistency(E0, _vec_at_cos(0.0)) == 0.5

    def test_antiparallel(self):
        assert cosine_consistency(E0, -E0) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cosine_consistency(E0, np.ones(3))

    def test_nonneg_cosine_identity_clamp(self):
        assert nonneg_cosine(E0, E0) == 1.0
        assert nonneg_cosine(E0, _vec_at_cos(-0.4)) == 0.0
        assert abs(nonneg_cosine(E0, _vec_at_cos(0.3)) - 0.3) < 1e-12


class TestKeepScore:
    def test_endpoints_exact(self):
        assert keep_score(0.8, 0.2, 1.0) == 0.8
        assert keep_score(0.8, 0.2, 0.0) == 0.2

    def test_midpoint(self):
        assert keep_score(0.8, 0.2, 0.5) == 0.5

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            keep_score(0.5, 0.5, 1.5)

    def test_monotone_in_both_inputs(self, rng):
        for _ in range(50):
            c, n, a = rng.uniform(size=3)
            eps = 0.01
            assert keep_score(min(c + eps, 1), n, a) >= keep_score(c, n, a)
            assert keep_score(c, min(n + eps, 1), a) >= keep_score(c, n, a)


class TestBuildGraph:
    def test_single_sample_three_qas_combinatorics(self, rng):
        corpus = random_corpus(rng, n_samples=1, qas=(3, 3))
        g = build_graph(corpus)
        assert (g.nodes["image"].n, g.nodes["caption"].n, g.nodes["qa"].n) == (1, 1, 3)
        counts = {name: r.n_edges for name, r in g.relations.items()}
        assert counts == {"described_by": 1, "asked_about": 3, "supports": 3, "similar": 6}

    def test_single_qa_has_no_similar_edges(self, rng):
        corpus = random_corpus(rng, n_samples=1, qas=(1, 1))
        g = build_graph(corpus)
        assert g.relations["similar"].n_edges == 0

    def test_per_sample_counts_randomized(self, rng):
        corpus = random_corpus(rng, n_samples=12, qas=(1, 8))
        g = build_graph(corpus)
        for i, s in enumerate(corpus.samples):
            k = len(s.qas)
            desc = np.sum(g.relations["described_by"].src == i)
            asked = np.sum(g.relations["asked_about"].src == i)
            sup = np.sum(g.relations["supports"].src == i)
            qa_rows = [r for r, (sid, _) in enumerate(g.nodes["qa"].node_ids) if sid == s.sample_id]
            sim = np.sum(np.isin(g.relations["similar"].src, qa_rows))
            assert (desc, asked, sup, sim) == (1, k, k, k * (k - 1))

    def test_feature_widths_f768(self, rng):
        corpus = random_corpus(rng, n_samples=1, qas=(1, 1), f=768)
        g = build_graph(corpus)
        assert g.nodes["image"].features.shape[1] == 769
        assert g.nodes["caption"].features.shape[1] == 768
        assert g.nodes["qa"].features.shape[1] == 769

    def test_token_position_invariant(self, rng):
        corpus = random_corpus(rng, n_samples=4, qas=(1, 3))
        g = build_graph(corpus)
        for i, s in enumerate(corpus.samples):
            tok = g.nodes["image"].features[i, corpus.f]
            assert tok == cosine_consistency(s.image_embedding, s.caption_embedding)
        row = 0
        for s in corpus.samples:
            for qa in s.qas:
                tok = g.nodes["qa"].features[row, corpus.f]
                assert tok == cosine_consistency(s.image_embedding, qa.qa_embedding)
                assert 0.0 <= tok <= 1.0
                row += 1

    def test_supports_attr_is_entailment(self, rng):
        corpus = random_corpus(rng, n_samples=3)
        g = build_graph(corpus)
        nli = [qa.nli_entailment for s in corpus.samples for qa in s.qas]
        np.testing.assert_array_equal(g.relations["supports"].attr, nli)

    def test_similar_symmetric_with_equal_attrs(self, rng):
        corpus = random_corpus(rng, n_samples=3, qas=(2, 4))
        g = build_graph(corpus)
        sim = g.relations["similar"]
        attr_of = {(s, d): a for s, d, a in zip(sim.src, sim.dst, sim.attr)}
        for (s, d), a in attr_of.items():
            assert (d, s) in attr_of and attr_of[(d, s)] == a

    def test_keep_soft_matches_formula(self, rng):
        corpus = random_corpus(rng, n_samples=3)
        g = build_graph(corpus, alpha=0.3)
        row = 0
        for s in corpus.samples:
            for qa in s.qas:
                tok = cosine_consistency(s.image_embedding, qa.qa_embedding)
                assert g.labels.keep_soft[row] == keep_score(tok, qa.nli_entailment, 0.3)
                row += 1

    def test_attribute_free_relations_have_empty_attr(self, rng):
        g = build_graph(random_corpus(rng))
        assert g.relations["described_by"].attr.shape == (0,)
        assert g.relations["asked_about"].attr.shape == (0,)

    def test_invalid_alpha(self, rng):
        with pytest.raises(ValueError):
            build_graph(random_corpus(rng), alpha=-0.1)


class TestAblations:
    def test_no_clip_token(self, rng):
        corpus = random_corpus(rng, n_samples=2)
        g = build_graph(corpus, no_clip_token=True)
        assert np.all(g.nodes["image"].features[:, corpus.f] == 0.0)
        assert np.all(g.nodes["qa"].features[:, corpus.f] == 0.0)
        nli = [qa.nli_entailment for s in corpus.samples for qa in s.qas]
        np.testing.assert_array_equal(g.labels.keep_soft, nli)

    def test_no_nli(self, rng):
        corpus = random_corpus(rng, n_samples=2)
        g = build_graph(corpus, no_nli=True)
        assert np.all(g.relations["supports"].attr == 1.0)
        np.testing.assert_array_equal(
            g.labels.keep_soft, g.nodes["qa"].features[:, corpus.f]
        )


class TestDeterminismAndSerialization:
    def test_two_builds_bit_identical(self, rng):
        corpus = random_corpus(rng, n_samples=5)
        g1 = build_graph(corpus, alpha=0.5)
        g2 = build_graph(corpus, alpha=0.5)
        assert graph_hash(g1) == graph_hash(g2)
        np.testing.assert_array_equal(g1.nodes["qa"].features, g2.nodes["qa"].features)

    def test_hash_sensitive_to_alpha_and_flags(self, rng):
        corpus = random_corpus(rng)
        h = graph_hash(build_graph(corpus, alpha=0.5))
        assert h != graph_hash(build_graph(corpus, alpha=0.6))
        assert h != graph_hash(build_graph(corpus, alpha=0.5, no_nli=True))

    def test_save_load_inline(self, tmp_path, rng):
        g = build_graph(random_corpus(rng, n_samples=3))
        recorded = save_graph(g, tmp_path / "g.json")
        loaded = load_graph(tmp_path / "g.json")
        assert graph_hash(loaded) == recorded == graph_hash(g)
        assert loaded.qa_ids() == g.qa_ids()

    def test_save_load_packed(self, tmp_path, rng):
        g = build_graph(random_corpus(rng, n_samples=3))
        recorded = save_graph(g, tmp_path / "g.json", packed=True)
        assert (tmp_path / "g.json.qa.f32").exists()
        loaded = load_graph(tmp_path / "g.json")
        # hash matches the float32-degraded artifact, by construction
        assert graph_hash(loaded) == recorded

    def test_corrupt_archive_detected(self, tmp_path, rng):
        g = build_graph(random_corpus(rng))
        save_graph(g, tmp_path / "g.json")
        text = (tmp_path / "g.json").read_text().replace("0.", "1.", 1)
        (tmp_path / "g.json").write_text(text)
        with pytest.raises(ValueError, match="hash mismatch"):
            load_graph(tmp_path / "g.json")
