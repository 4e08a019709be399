import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacindex.centroid_index import (
    CentroidGraph,
    InvertedLists,
    build_graph,
    build_inverted_lists,
    search_centroids,
)
from tacindex.errors import UsageError

from conftest import unit


def clustered_centroids(n, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((max(1, n // 20), dim))
    return unit(centers[rng.integers(0, centers.shape[0], n)] + 0.4 * rng.standard_normal((n, dim)))


def graph_recall(n, kappa_c=40, n_queries=50, m=16, ef_c=100, seed=0):
    vecs = clustered_centroids(n, seed=seed)
    g = build_graph(vecs, m, ef_c, seed)
    rng = np.random.default_rng(seed + 1)
    queries = unit(vecs[rng.integers(0, n, n_queries)] + 0.3 * rng.standard_normal((n_queries, vecs.shape[1])))
    hits = 0
    for q in queries:
        ids, _ = g.search(q, kappa_c, int(1.5 * kappa_c), exhaustive=False)
        ref, _ = g.search(q, kappa_c, n, exhaustive=True)
        hits += len(set(ids.tolist()) & set(ref.tolist()))
    return hits / (kappa_c * n_queries)


class TestGraph:
    def test_single_node(self):
        g = build_graph(unit(np.ones((1, 4))))
        ids, scores = g.search(unit(np.arange(4.0)[None])[0], 5, 8)
        assert ids.tolist() == [0]

    def test_query_equal_to_centroid(self):
        vecs = clustered_centroids(300)
        g = build_graph(vecs, 8, 40)
        ids, scores = g.search(vecs[123], 5, 20, exhaustive=False)
        assert ids[0] == 123
        assert scores[0] == pytest.approx(1.0, abs=1e-6)

    def test_exhaustive_is_exact_ranking(self):
        vecs = clustered_centroids(200)
        g = build_graph(vecs, 8, 40)
        q = unit(np.random.default_rng(3).standard_normal(16))
        ids, scores = g.search(q, 200, 300)
        s = vecs @ q
        assert ids.tolist() == np.lexsort((np.arange(200), -s)).tolist()
        assert np.all(np.diff(scores) <= 0)

    def test_graph_walk_with_full_beam_matches_scan(self):
        vecs = clustered_centroids(250, seed=2)
        g = build_graph(vecs, 6, 30, seed=2)
        for q in unit(np.random.default_rng(4).standard_normal((10, 16))):
            a, _ = g.search(q, 30, 250, exhaustive=False)
            b, _ = g.search(q, 30, 250, exhaustive=True)
            assert a.tolist() == b.tolist()

    def test_every_node_reachable_and_degrees_capped(self):
        vecs = clustered_centroids(400, seed=5)
        g = build_graph(vecs, 6, 30, seed=5)
        assert g.reachable().all()
        for layer, adj in enumerate(g.layers):
            assert all(a.size <= g.cap(layer) for a in adj.values())
            assert all(node not in a.tolist() for node, a in adj.items())

    def test_recall_5k(self):
        assert graph_recall(5000) >= 0.95

    @pytest.mark.slow
    def test_recall_50k(self):
        assert graph_recall(50_000, m=16, ef_c=100, n_queries=30) >= 0.95

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000))
    def test_results_within_exhaustive_prefix(self, seed):
        vecs = clustered_centroids(300, seed=seed % 7)
        g = build_graph(vecs, 8, 60, seed=seed % 7)
        q = unit(np.random.default_rng(seed).standard_normal(16))
        ids, scores = g.search(q, 10, 40, exhaustive=False)
        ref, ref_s = g.search(q, 300, 300)
        rank = {c: r for r, c in enumerate(ref.tolist())}
        assert max(rank[c] for c in ids.tolist()) < 10 + 20
        np.testing.assert_allclose(scores, vecs[ids] @ q, atol=1e-6)

    def test_ef_below_k(self):
        g = build_graph(clustered_centroids(100), 8, 20)
        with pytest.raises(UsageError):
            g.search(np.ones(16, np.float32) / 4, 10, 5, exhaustive=False)

    def test_deterministic_and_round_trip(self, tmp_path):
        vecs = clustered_centroids(300, seed=8)
        build_graph(vecs, 8, 40, seed=1).save(tmp_path / "a.bin")
        build_graph(vecs, 8, 40, seed=1).save(tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        g = CentroidGraph.load(tmp_path / "a.bin", vecs)
        g.save(tmp_path / "c.bin")
        assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "a.bin").read_bytes()

    def test_dot_counter(self):
        g = build_graph(clustered_centroids(100), 8, 20)
        g.take_dot_count()
        search_centroids(g, np.ones(16, np.float32) / 4, 5, 100)
        assert g.take_dot_count() == 100
        assert g.take_dot_count() == 0


class TestInvertedLists:
    def test_dedup(self):
        lists = build_inverted_lists(np.array([0, 0, 1, 0]), np.array([0, 0, 0, 1]), 3, 2)
        assert lists[0].tolist() == [0, 1]
        assert lists[1].tolist() == [0]
        assert lists[2].tolist() == []
        assert lists.n_postings == 3

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_against_scan(self, seed):
        rng = np.random.default_rng(seed)
        n, k, d = int(rng.integers(1, 300)), int(rng.integers(1, 30)), int(rng.integers(1, 40))
        cids = rng.integers(0, k, n)
        docs = np.sort(rng.integers(0, d, n))
        lists = build_inverted_lists(cids, docs, k, d)
        for c in range(k):
            assert lists[c].tolist() == sorted({int(x) for x, y in zip(docs, cids) if y == c})
        assert lists.n_postings <= n
        assert (lists.n_postings == n) == (len(set(zip(cids.tolist(), docs.tolist()))) == n)

    def test_round_trip_delta_encoded(self, tmp_path):
        rng = np.random.default_rng(1)
        lists = build_inverted_lists(rng.integers(0, 50, 2000), np.sort(rng.integers(0, 300, 2000)), 60, 300)
        lists.save(tmp_path / "l.bin")
        back = InvertedLists.load(tmp_path / "l.bin")
        assert np.array_equal(back.offsets, lists.offsets)
        assert np.array_equal(back.doc_ids, lists.doc_ids)
        # stored ids are gaps, so they never exceed the largest doc id
        raw = np.frombuffer((tmp_path / "l.bin").read_bytes()[24 + 8 * 61 :], dtype="<u4")
        assert raw.sum() < lists.doc_ids.astype(np.int64).sum()
