import numpy as np
import pytest

from tacindex.engine import (
    CandidateSet,
    SearchParams,
    exhaustive_maxsim,
    gather,
    maxsim_compressed,
    rank,
    refine_document,
    search,
    truncate_and_prune,
)
from tacindex.errors import CorruptRecordError, UsageError
from tacindex.pq import build_distance_tables, reconstruct

from conftest import unit
from oracles import centroid_interaction_scores, maxsim_f64


def cands(scores, ids=None):
    scores = np.asarray(scores, dtype=np.float32)
    ids = np.arange(scores.size) if ids is None else np.asarray(ids)
    return CandidateSet(ids, scores)


class TestParams:
    def test_ef_default(self):
        assert SearchParams(kappa_c=40).ef == 60
        assert SearchParams(kappa_c=15).ef == 23

    @pytest.mark.parametrize("kw", [dict(kappa_c=0), dict(k=11, kappa_d=10), dict(alpha=0.0),
                                    dict(alpha=1.5), dict(kappa_c=10, ef_search=5)])
    def test_invalid(self, kw):
        with pytest.raises(UsageError):
            SearchParams(**kw)


class TestPrune:
    def test_worked_example(self):
        out = truncate_and_prune(cands([10, 6, 4, 3]), 3, 0.5)
        assert out.scores.tolist() == [10, 6]

    def test_alpha_one_keeps_ties_with_max(self):
        out = truncate_and_prune(cands([5, 7, 7, 2]), 4, 1.0)
        assert out.doc_ids.tolist() == [1, 2]

    def test_tiny_alpha_is_truncation(self):
        out = truncate_and_prune(cands([1, 5, 3, 4]), 3, 1e-9)
        assert out.doc_ids.tolist() == [1, 3, 2]

    def test_ties_at_cutoff_by_doc_id(self):
        out = truncate_and_prune(cands([2, 2, 2], ids=[9, 4, 6]), 2, 1e-9)
        assert out.doc_ids.tolist() == [4, 6]

    def test_non_positive_max_skips_threshold(self):
        out = truncate_and_prune(cands([-1, -2]), 5, 0.5)
        assert out.doc_ids.tolist() == [0, 1]


def test_rank_order():
    ids, scores = rank(np.array([3, 1, 2]), np.array([0.5, 0.5, 0.9], dtype=np.float32), 2)
    assert ids.tolist() == [2, 1]


class TestGather:
    def test_max_semantics(self, small_world):
        corpus, queries, _, index = small_world
        q = queries.queries[0][:1]
        p = SearchParams(kappa_c=index.codebook.size, kappa_d=10, k=1)
        got = gather(q, index, p).as_dict()
        ref = centroid_interaction_scores(q, index.codebook.centroids, index.compressed.centroid_ids,
                                          corpus.doc_of_row, corpus.n_docs)
        assert sorted(got) == list(range(corpus.n_docs))
        np.testing.assert_allclose([got[d] for d in range(corpus.n_docs)], ref, atol=1e-5)

    def test_superset_in_kappa_c(self, small_world):
        _, queries, _, index = small_world
        prev = set()
        for kc in (1, 3, 10, 40, 200):
            p = SearchParams(kappa_c=kc, kappa_d=10, k=1, exhaustive_centroids=True)
            got = set(gather(queries.queries[1], index, p).doc_ids.tolist())
            assert prev <= got
            prev = got


class TestRefine:
    def test_matches_decompressed_brute_force(self, small_world):
        corpus, queries, _, index = small_world
        rec = reconstruct(index.compressed, index.codebook.centroids, index.codec)
        docs = np.arange(0, corpus.n_docs, 7)
        offs = index.compressed.doc_offsets
        for q in queries.queries[:4]:
            got = maxsim_compressed(q, docs, index, batch_tokens=100)
            ref = maxsim_f64(q, [rec[offs[d] : offs[d + 1]] for d in docs])
            np.testing.assert_allclose(got, ref, atol=1e-4)

    def test_single_record_path_agrees(self, small_world):
        _, queries, _, index = small_world
        q = queries.queries[2]
        tables = build_distance_tables(q, index.codec)
        batched = maxsim_compressed(q, np.array([5, 17]), index)
        one = [refine_document(q, d, index, tables) for d in (5, 17)]
        np.testing.assert_allclose(batched, one, atol=1e-5)

    def test_corrupt_record(self, small_world):
        _, queries, _, index = small_world
        comp = index.compressed
        saved = comp.centroid_ids.copy()
        lo = comp.doc_offsets[3]
        try:
            comp.centroid_ids[lo] = index.codebook.size + 5
            with pytest.raises(CorruptRecordError) as err:
                maxsim_compressed(queries.queries[0], np.array([1, 3, 4]), index)
            assert err.value.doc_id == 3
        finally:
            comp.centroid_ids[:] = saved


class TestSearch:
    def test_k_bounds_and_pruning_safety(self, small_world):
        _, queries, _, index = small_world
        p = SearchParams(kappa_c=10, kappa_d=50, alpha=0.6, k=10)
        for q in queries.queries[:5]:
            r = search(q, index, p)
            assert r.doc_ids.size <= 10
            assert set(r.doc_ids.tolist()) <= set(gather(q, index, p).doc_ids.tolist())
            assert set(r.timings_us) == {"gather_us", "prune_us", "refine_us", "total_us"}
            assert r.counters["centroid_dots"] > 0

    def test_k_beyond_survivors(self, small_world):
        _, queries, _, index = small_world
        r = search(queries.queries[0], index, SearchParams(kappa_c=5, kappa_d=5, alpha=1.0, k=5))
        assert r.doc_ids.size == r.n_pruned <= 5

    def test_deterministic(self, small_world):
        _, queries, _, index = small_world
        p = SearchParams(kappa_c=20, kappa_d=100)
        a = search(queries.queries[3], index, p)
        b = search(queries.queries[3], index, p)
        assert a.doc_ids.tolist() == b.doc_ids.tolist() and a.scores.tobytes() == b.scores.tobytes()


class TestExhaustive:
    def test_one_doc(self):
        v = unit(np.eye(3))
        ids, scores = exhaustive_maxsim(v[:2], vectors=v, doc_offsets=np.array([0, 3]))
        assert ids.tolist() == [0] and scores[0] == pytest.approx(2.0)

    def test_self_query_scores_n_q(self):
        rng = np.random.default_rng(0)
        v = unit(rng.standard_normal((10, 8)))
        _, scores = exhaustive_maxsim(v[:4], vectors=v, doc_offsets=np.array([0, 4, 10]), k=1)
        assert scores[0] == pytest.approx(4.0, abs=1e-5)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        v = unit(rng.standard_normal((12, 8)))
        q = unit(rng.standard_normal((3, 8)))
        perm = np.r_[rng.permutation(5), 5 + rng.permutation(7)]
        a = exhaustive_maxsim(q, vectors=v, doc_offsets=np.array([0, 5, 12]))
        b = exhaustive_maxsim(q, vectors=v[perm], doc_offsets=np.array([0, 5, 12]))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_allclose(a[1], b[1], atol=1e-6)

    def test_against_double_precision(self, small_world):
        corpus, queries, _, _ = small_world
        offs = corpus.doc_offsets.astype(np.int64)
        docs = [corpus.vectors[offs[d] : offs[d + 1]] for d in range(corpus.n_docs)]
        for q in queries.queries[:3]:
            ids, scores = exhaustive_maxsim(q, corpus)
            np.testing.assert_allclose(scores, maxsim_f64(q, docs)[ids], atol=1e-5)

    def test_rerank_mode(self, small_world):
        corpus, queries, _, _ = small_world
        ids, _ = exhaustive_maxsim(queries.queries[0], corpus, candidates=[5, 9, 2], k=2)
        assert set(ids.tolist()) <= {5, 9, 2} and ids.size == 2

    def test_needs_input(self):
        with pytest.raises(UsageError):
            exhaustive_maxsim(np.ones((1, 2), np.float32))
