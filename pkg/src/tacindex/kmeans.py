"""Lloyd's k-means with k-means++ seeding.

One kernel serves per-token clustering, the flat baseline and PQ codebook
training. Every call reports how many point-to-centroid distances it
evaluated, so the cost of different clustering strategies can be compared
by count rather than only by wall time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# bytes budget for one block of the point x centroid score matrix
_BLOCK_BYTES = 64 * 1024 * 1024


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    distance_ops: int = 0
    repairs: int = 0

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")


def nearest_centroids(x: np.ndarray, centroids: np.ndarray, x_sq: np.ndarray | None = None):
    """Index of and squared distance to the nearest centroid, per row of ``x``.

    Ties resolve to the lowest centroid index.
    """
    x = np.asarray(x, dtype=np.float32)
    centroids = np.asarray(centroids, dtype=np.float32)
    n, k = x.shape[0], centroids.shape[0]
    if x_sq is None:
        x_sq = np.einsum("ij,ij->i", x, x)
    half_c_sq = 0.5 * np.einsum("ij,ij->i", centroids, centroids)
    labels = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float32)
    step = max(1, _BLOCK_BYTES // (4 * max(k, 1)))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        s = x[lo:hi] @ centroids.T
        s -= half_c_sq
        best = s.argmax(axis=1)
        labels[lo:hi] = best
        d2[lo:hi] = x_sq[lo:hi] - 2.0 * s[np.arange(hi - lo), best]
    np.maximum(d2, 0.0, out=d2)
    return labels, d2


def exact_sq_dist(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Squared distance of each row to its labelled centroid, in float64."""
    diff = x.astype(np.float64) - centroids[labels].astype(np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator, pool_factor: int = 16):
    """k-means++ seeding over a uniform pool of at most ``pool_factor * k`` rows.

    Returns (centers, distance_ops).
    """
    n = x.shape[0]
    if n > pool_factor * k:
        pool = x[np.sort(rng.choice(n, size=pool_factor * k, replace=False))]
    else:
        pool = x
    m = pool.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(m)
    d2 = np.einsum("ij,ij->i", pool - pool[chosen[0]], pool - pool[chosen[0]]).astype(np.float64)
    taken = np.zeros(m, dtype=bool)
    taken[chosen[0]] = True
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            cum = np.cumsum(d2)
            idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
            idx = min(idx, m - 1)
            # guard against landing on a zero-weight row through rounding
            if d2[idx] == 0:
                idx = int(np.flatnonzero(d2 > 0)[0])
        else:
            free = np.flatnonzero(~taken)
            idx = int(free[rng.integers(free.size)]) if free.size else int(rng.integers(m))
        chosen[i] = idx
        taken[idx] = True
        diff = pool - pool[idx]
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)
    return pool[chosen].astype(np.float32), m * k


def _cluster_sums(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    sums = np.empty((k, x.shape[1]), dtype=np.float64)
    for j in range(x.shape[1]):
        sums[:, j] = np.bincount(labels, weights=x[:, j], minlength=k)
    return sums


def _repair_empty(x, centroids, labels, d2, counts) -> int:
    """Move each empty centroid onto the farthest member of the worst cluster.

    The donor is the cluster with the largest inertia among those holding at
    least two members, so a repair can never empty another cluster.
    """
    k = centroids.shape[0]
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return 0
    cluster_inertia = np.bincount(labels, weights=d2, minlength=k)
    for e in empty:
        eligible = counts >= 2
        donor = int(np.argmax(np.where(eligible, cluster_inertia, -1.0)))
        members = np.flatnonzero(labels == donor)
        far = int(members[np.argmax(d2[members])])
        centroids[e] = x[far]
        cluster_inertia[donor] -= d2[far]
        cluster_inertia[e] = 0.0
        counts[donor] -= 1
        counts[e] = 1
        labels[far] = e
        d2[far] = 0.0
    return int(empty.size)


def lloyd(
    x: np.ndarray,
    k: int,
    iterations: int,
    rng: np.random.Generator,
    *,
    normalize: bool = False,
    init: np.ndarray | None = None,
    pool_factor: int = 16,
) -> KMeansResult:
    """Run ``iterations`` rounds of assignment + update.

    ``inertia_history[t]`` is the within-cluster sum of squares measured at
    the assignment step of round ``t`` (before any final renormalization).
    With ``normalize`` the returned centroids are rescaled to unit L2 norm.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    ops = 0
    if init is not None:
        centroids = np.array(init, dtype=np.float32, copy=True)
        if centroids.shape != (k, x.shape[1]):
            raise ValueError(f"init has shape {centroids.shape}, expected {(k, x.shape[1])}")
    elif k == 1:
        centroids = x.mean(axis=0, dtype=np.float64, keepdims=True).astype(np.float32)
    else:
        centroids, ops = kmeans_plus_plus(x, k, rng, pool_factor)

    x_sq = np.einsum("ij,ij->i", x, x)
    history = []
    repairs = 0
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iterations):
        if k > 1:
            labels, _ = nearest_centroids(x, centroids, x_sq)
            ops += n * k
        else:
            ops += n
        d2 = exact_sq_dist(x, centroids, labels)
        history.append(float(d2.sum()))
        counts = np.bincount(labels, minlength=k)
        sums = _cluster_sums(x, labels, k)
        nonempty = counts > 0
        centroids[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
        repairs += _repair_empty(x, centroids, labels, d2, counts)

    if normalize:
        centroids = unit_rows(centroids, fallback=x, labels=labels)
    return KMeansResult(centroids, labels, history, ops, repairs)


def unit_rows(centroids: np.ndarray, fallback: np.ndarray | None = None, labels=None) -> np.ndarray:
    """Rescale rows to unit norm; a zero row takes the direction of one of its members."""
    c = centroids.astype(np.float64)
    norms = np.linalg.norm(c, axis=1)
    zero = norms == 0
    if zero.any() and fallback is not None:
        for j in np.flatnonzero(zero):
            members = np.flatnonzero(labels == j) if labels is not None else np.array([], dtype=int)
            src = fallback[members[0]] if members.size else fallback[0]
            c[j] = src
            norms[j] = np.linalg.norm(c[j])
    norms[norms == 0] = 1.0
    return (c / norms[:, None]).astype(np.float32)
