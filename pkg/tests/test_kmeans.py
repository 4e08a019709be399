import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacindex.kmeans import exact_sq_dist, kmeans_plus_plus, lloyd, nearest_centroids, unit_rows


def instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 300))
    k = int(rng.integers(2, min(n, 30) + 1))
    return rng, rng.standard_normal((n, int(rng.integers(1, 17)))).astype(np.float32), k


class TestNearest:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((200, 6)).astype(np.float32)
        c = rng.standard_normal((17, 6)).astype(np.float32)
        labels, d2 = nearest_centroids(x, c)
        full = ((x[:, None, :].astype(np.float64) - c[None].astype(np.float64)) ** 2).sum(-1)
        assert np.array_equal(labels, full.argmin(axis=1))
        np.testing.assert_allclose(d2, full.min(axis=1), rtol=1e-4, atol=1e-4)

    def test_ties_go_to_lowest_index(self):
        c = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        labels, _ = nearest_centroids(np.array([[1.0, 0.0]], dtype=np.float32), c)
        assert labels.tolist() == [0]


class TestLloyd:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_inertia_non_increasing(self, seed):
        rng, x, k = instance(seed)
        h = lloyd(x, k, 8, rng).inertia_history
        assert all(b <= a for a, b in zip(h, h[1:]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_repair_with_bad_init(self, seed):
        rng, x, k = instance(seed)
        init = x[rng.choice(x.shape[0], k, replace=False)].copy()
        init[1:] = 50.0  # every centroid but the first starts far away and goes empty
        res = lloyd(x, k, 5, rng, init=init)
        assert res.repairs >= 1
        assert np.bincount(res.labels, minlength=k).min() >= 1
        h = res.inertia_history
        assert all(b <= a for a, b in zip(h, h[1:]))

    def test_k_equals_n(self):
        x = np.eye(4, dtype=np.float32) * 3
        res = lloyd(x, 4, 3, np.random.default_rng(0), normalize=True)
        np.testing.assert_array_equal(np.sort(res.centroids, axis=0), np.sort(np.eye(4, dtype=np.float32), axis=0))

    def test_k_one_is_mean(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((50, 3)).astype(np.float32)
        res = lloyd(x, 1, 2, rng)
        np.testing.assert_allclose(res.centroids[0], x.mean(axis=0), atol=1e-6)

    def test_deterministic(self):
        _, x, k = instance(5)
        a = lloyd(x, k, 4, np.random.default_rng(9))
        b = lloyd(x, k, 4, np.random.default_rng(9))
        assert a.centroids.tobytes() == b.centroids.tobytes()

    def test_distance_ops(self):
        _, x, k = instance(6)
        res = lloyd(x, k, 3, np.random.default_rng(0), pool_factor=1000)
        assert res.distance_ops == x.shape[0] * k + 3 * x.shape[0] * k

    def test_final_inertia_matches_labels(self):
        rng, x, k = instance(7)
        res = lloyd(x, k, 1, rng)
        assert res.inertia > 0
        assert exact_sq_dist(x, res.centroids, res.labels).sum() <= res.inertia + 1e-6

    def test_bad_k(self):
        with pytest.raises(ValueError):
            lloyd(np.zeros((2, 2), dtype=np.float32), 3, 1, np.random.default_rng(0))


def test_seeding_picks_distinct_rows():
    x = np.arange(20, dtype=np.float32).reshape(10, 2)
    centers, ops = kmeans_plus_plus(x, 10, np.random.default_rng(0))
    assert len({tuple(r) for r in centers.tolist()}) == 10
    assert ops == 100


def test_unit_rows_zero_fallback():
    c = np.array([[0.0, 0.0], [3.0, 4.0]], dtype=np.float32)
    out = unit_rows(c, fallback=np.array([[0.0, 2.0], [1.0, 0.0]], dtype=np.float32), labels=np.array([0, 1]))
    np.testing.assert_allclose(out, [[0.0, 1.0], [0.6, 0.8]], atol=1e-7)
