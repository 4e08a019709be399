"""Token-aware clustering.

The global centroid budget is split across token types in four phases
(tail handling, damped scoring, bounding, reconciliation), then each
token's occurrences are clustered independently with its own share.
"""

from __future__ import annotations

import heapq
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property

import numpy as np

from .binio import BlobReader, write_blob
from .corpus import TokenVectorCorpus
from .errors import (
    ClusteringError,
    InfeasibleBudgetError,
    MissingTokenError,
    SizeMismatchError,
    UsageError,
    ZeroWeightError,
)
from .kmeans import KMeansResult, lloyd, nearest_centroids, unit_rows

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_CAP = 1 << 18
TRAIN_POINTS_PER_CENTROID = 256


class Category(IntEnum):
    MICRO = 0
    SMALL = 1
    ACTIVE = 2


def token_rng(seed: int, token_id: int) -> np.random.Generator:
    """Per-token generator, independent of scheduling order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(token_id)]))


@dataclass(frozen=True)
class TokenGroups:
    """Corpus rows grouped by token id (stable order inside each group)."""

    order: np.ndarray
    token_ids: np.ndarray
    starts: np.ndarray
    counts: np.ndarray

    def rows(self, i: int) -> np.ndarray:
        return self.order[self.starts[i] : self.starts[i] + self.counts[i]]


def group_by_token(corpus: TokenVectorCorpus) -> TokenGroups:
    order = np.argsort(corpus.token_ids, kind="stable")
    counts_all = corpus.token_counts
    present = np.flatnonzero(counts_all)
    counts = counts_all[present]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    return TokenGroups(order, present.astype(np.int64), starts, counts)


# ---------------------------------------------------------------------------
# statistics


@dataclass
class TokenStats:
    token_id: int
    count: int
    mean: np.ndarray
    spread: np.float32
    weight: float


def spread_of(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Mean vector and mean squared distance to it, accumulated in float64."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    diff = x - mean
    return mean, float(np.einsum("ij,ij->", diff, diff) / x.shape[0])


def compute_token_stats(
    corpus: TokenVectorCorpus, sample_cap: int = DEFAULT_SAMPLE_CAP, seed: int = 0
) -> list[TokenStats]:
    """One ``TokenStats`` per distinct token, in token-id order.

    Counts are exact; mean and spread come from at most ``sample_cap``
    uniformly sampled occurrences.
    """
    if sample_cap < 1:
        raise UsageError("sample_cap must be >= 1")
    groups = group_by_token(corpus)
    stats = []
    for i, tok in enumerate(groups.token_ids):
        rows = groups.rows(i)
        n = rows.size
        if n > sample_cap:
            rows = np.sort(token_rng(seed, tok).choice(rows, size=sample_cap, replace=False))
        mean, spread = spread_of(corpus.vectors[rows])
        s = np.float32(spread)
        stats.append(TokenStats(int(tok), int(n), mean.astype(np.float32), s, math.sqrt(n) * float(s)))
    return stats


def damped_weight(count: int, spread: float) -> float:
    return math.sqrt(count) * float(spread)


def speedup_lower_bound(stats) -> float:
    """Total weight over the largest single-token weight."""
    weights = [s.weight for s in stats]
    top = max(weights, default=0.0)
    if top <= 0:
        raise ZeroWeightError("speedup bound needs at least one token with positive weight")
    return math.fsum(weights) / top


# ---------------------------------------------------------------------------
# allocation


@dataclass
class AllocationPlan:
    token_ids: np.ndarray
    counts: np.ndarray
    weights: np.ndarray
    category: np.ndarray
    kappa: np.ndarray
    budget: int
    mu: int
    tau: int
    epsilon: int
    theta: float

    @property
    def total(self) -> int:
        return int(self.kappa.sum())

    @property
    def gap(self) -> int:
        """Budget minus allocated total; non-zero only when bounds made the budget unreachable."""
        return self.budget - self.total

    def kappa_of(self, token_id: int) -> int:
        i = int(np.searchsorted(self.token_ids, token_id))
        if i >= self.token_ids.size or self.token_ids[i] != token_id:
            raise KeyError(token_id)
        return int(self.kappa[i])

    def summary(self) -> list[dict]:
        rows = []
        for cat in Category:
            sel = self.category == cat
            rows.append(
                {
                    "category": cat.name.lower(),
                    "tokens": int(sel.sum()),
                    "centroids": int(self.kappa[sel].sum()),
                    "vectors": int(self.counts[sel].sum()),
                }
            )
        return rows

    def report(self, bound: float | None = None) -> str:
        lines = [
            f"budget={self.budget} mu={self.mu} tau={self.tau} epsilon={self.epsilon} theta={self.theta}",
            f"{'category':<10}{'tokens':>10}{'centroids':>12}{'vectors':>14}",
        ]
        for row in self.summary():
            lines.append(f"{row['category']:<10}{row['tokens']:>10}{row['centroids']:>12}{row['vectors']:>14}")
        lines.append(f"{'total':<10}{self.token_ids.size:>10}{self.total:>12}{int(self.counts.sum()):>14}")
        if self.gap:
            lines.append(f"WARNING: bounds leave the budget unreachable, gap={self.gap}")
        if bound is not None:
            lines.append(f"speedup_lower_bound={bound:.6f}")
        return "\n".join(lines)


def allocate(
    stats,
    budget: int,
    mu: int = 128,
    tau: int = 256,
    epsilon: int = 4,
    theta: float = 39,
) -> AllocationPlan:
    """Distribute ``budget`` centroids across the tokens in ``stats``."""
    n_tokens = len(stats)
    if n_tokens == 0:
        raise UsageError("no tokens to allocate")
    if budget < n_tokens:
        raise InfeasibleBudgetError(f"budget {budget} is smaller than the {n_tokens} tokens to cover")
    if mu > tau:
        raise UsageError(f"mu ({mu}) must not exceed tau ({tau})")
    if epsilon < 1 or theta < 1:
        raise UsageError("epsilon and theta must be >= 1")

    stats = sorted(stats, key=lambda s: s.token_id)
    ids = np.array([s.token_id for s in stats], dtype=np.int64)
    counts = np.array([s.count for s in stats], dtype=np.int64)
    weights = np.array([s.weight for s in stats], dtype=np.float64)
    category = np.full(n_tokens, Category.ACTIVE, dtype=np.int8)
    category[counts < tau] = Category.SMALL
    category[counts < mu] = Category.MICRO
    kappa = np.zeros(n_tokens, dtype=np.int64)

    # phase 1: tail
    kappa[category == Category.MICRO] = 1
    small = category == Category.SMALL
    kappa[small] = np.minimum(2, counts[small])
    active = np.flatnonzero(category == Category.ACTIVE)

    # phase 2: damped proportional share of what the tail left over
    remaining = max(budget - int(kappa.sum()), 0)
    total_w = math.fsum(weights[active])
    ideal = np.zeros(n_tokens, dtype=np.float64)
    if total_w > 0:
        ideal[active] = [weights[j] / total_w * remaining for j in active]
    kappa[active] = np.floor(ideal[active]).astype(np.int64)

    # phase 3: floor epsilon, at least theta vectors per centroid; the floor wins on conflict
    lower = np.minimum(epsilon, counts)
    upper = np.maximum(np.floor(counts / theta).astype(np.int64), lower)
    kappa[active] = np.clip(kappa[active], lower[active], upper[active])

    # phase 4: reconcile to the exact budget
    diff = budget - int(kappa.sum())
    if diff > 0:
        heap = [(-(ideal[j] - kappa[j]), int(ids[j]), j) for j in active if kappa[j] < upper[j]]
        heapq.heapify(heap)
        while diff > 0 and heap:
            _, tid, j = heapq.heappop(heap)
            kappa[j] += 1
            diff -= 1
            if kappa[j] < upper[j]:
                heapq.heappush(heap, (-(ideal[j] - kappa[j]), tid, j))
    elif diff < 0:
        heap = [(weights[j] / kappa[j], int(ids[j]), j) for j in active if kappa[j] > lower[j]]
        heapq.heapify(heap)
        while diff < 0 and heap:
            _, tid, j = heapq.heappop(heap)
            kappa[j] -= 1
            diff += 1
            if kappa[j] > lower[j]:
                heapq.heappush(heap, (weights[j] / kappa[j], tid, j))

    plan = AllocationPlan(ids, counts, weights, category, kappa, budget, mu, tau, epsilon, theta)
    if plan.gap:
        logger.warning("allocation bounds make budget %d unreachable; allocated %d", budget, plan.total)
    return plan


def ideal_allocation(weights, budget: float) -> np.ndarray:
    """Real-valued proportional shares, no tail handling, floors or bounds."""
    w = np.asarray(weights, dtype=np.float64)
    return w / w.sum() * budget


# ---------------------------------------------------------------------------
# codebook


_CODEBOOK_MAGIC = b"TACCBK\x00\x01"


@dataclass(eq=False)
class TokenPartitionedCodebook:
    """Global centroid matrix; token t owns rows ``offsets[t] : offsets[t] + lengths[t]``."""

    centroids: np.ndarray
    offsets: np.ndarray
    lengths: np.ndarray
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        self.offsets = np.asarray(self.offsets, dtype=np.uint64)
        self.lengths = np.asarray(self.lengths, dtype=np.uint32)
        if self.offsets.shape != self.lengths.shape:
            raise SizeMismatchError("offset and length tables differ in size")

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.offsets.size

    def token_range(self, token_id: int) -> tuple[int, int]:
        if token_id >= self.vocab_size or self.lengths[token_id] == 0:
            raise MissingTokenError(f"token {token_id} has no centroids in the codebook")
        lo = int(self.offsets[token_id])
        return lo, lo + int(self.lengths[token_id])

    @cached_property
    def centroid_token(self) -> np.ndarray:
        """Token id owning each centroid row."""
        owner = np.empty(self.size, dtype=np.int64)
        for t in np.flatnonzero(self.lengths):
            lo = int(self.offsets[t])
            owner[lo : lo + int(self.lengths[t])] = t
        return owner

    def save(self, path) -> None:
        write_blob(
            path, _CODEBOOK_MAGIC, "QII",
            (self.size, self.dim, self.vocab_size),
            [(self.centroids, "<f4"), (self.offsets, "<u8"), (self.lengths, "<u4")],
        )

    @classmethod
    def load(cls, path) -> "TokenPartitionedCodebook":
        r = BlobReader(path)
        k, dim, vocab = r.header(_CODEBOOK_MAGIC, "QII")
        centroids = r.array("<f4", k * dim).reshape(k, dim)
        offsets = r.array("<u8", vocab)
        lengths = r.array("<u4", vocab)
        r.done()
        return cls(centroids, offsets, lengths)


# ---------------------------------------------------------------------------
# training


def cluster_token(
    vectors: np.ndarray,
    k: int,
    iterations: int = 10,
    seed: int | np.random.Generator = 0,
    train_factor: int = TRAIN_POINTS_PER_CENTROID,
) -> KMeansResult:
    """Cluster one token's occurrences into ``k`` unit-norm centroids.

    Lloyd runs on at most ``train_factor * k`` sampled occurrences.
    """
    n = vectors.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cannot fit {k} centroids to {n} vectors")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n > train_factor * k:
        vectors = vectors[np.sort(rng.choice(n, size=train_factor * k, replace=False))]
    return lloyd(vectors, k, iterations, rng, normalize=True)


def train(
    corpus: TokenVectorCorpus,
    plan: AllocationPlan,
    iterations: int = 10,
    seed: int = 0,
    threads: int = 1,
    train_factor: int = TRAIN_POINTS_PER_CENTROID,
) -> TokenPartitionedCodebook:
    """Cluster every token independently and concatenate the results in token-id order."""
    start = time.perf_counter()
    groups = group_by_token(corpus)
    pos = {int(t): i for i, t in enumerate(groups.token_ids)}
    missing = [int(t) for t in plan.token_ids if int(t) not in pos]
    if missing:
        raise MissingTokenError(f"plan tokens absent from the corpus: {missing[:5]}")

    def job(i):
        tok, k = int(plan.token_ids[i]), int(plan.kappa[i])
        try:
            x = corpus.vectors[groups.rows(pos[tok])]
            return cluster_token(x, k, iterations, token_rng(seed, tok), train_factor)
        except Exception as exc:
            raise ClusteringError(tok, exc) from exc

    order = range(plan.token_ids.size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, order))
    else:
        results = [job(i) for i in order]

    offsets = np.zeros(corpus.vocab_size, dtype=np.uint64)
    lengths = np.zeros(corpus.vocab_size, dtype=np.uint32)
    starts = np.concatenate([[0], np.cumsum(plan.kappa)[:-1]])
    offsets[plan.token_ids] = starts
    lengths[plan.token_ids] = plan.kappa
    centroids = np.vstack([r.centroids for r in results])
    elapsed = time.perf_counter() - start
    info = {
        "distance_ops": int(sum(r.distance_ops for r in results)),
        "seconds": elapsed,
        "repairs": int(sum(r.repairs for r in results)),
    }
    logger.info("trained %d centroids for %d tokens in %.2fs", centroids.shape[0], len(results), elapsed)
    return TokenPartitionedCodebook(centroids, offsets, lengths, info)


# ---------------------------------------------------------------------------
# assignment


_ASSIGN_MAGIC = b"TACASG\x00\x01"


@dataclass(eq=False)
class Assignment:
    centroid_ids: np.ndarray
    residual_norms: np.ndarray
    distance_ops: int = 0

    def save(self, path) -> None:
        write_blob(
            path, _ASSIGN_MAGIC, "Q", (self.centroid_ids.size,),
            [(self.centroid_ids, "<u4"), (self.residual_norms, "<f4")],
        )

    @classmethod
    def load(cls, path) -> "Assignment":
        r = BlobReader(path)
        (n,) = r.header(_ASSIGN_MAGIC, "Q")
        ids = r.array("<u4", n)
        norms = r.array("<f4", n)
        r.done()
        return cls(ids, norms)

    def inertia(self) -> float:
        return float(np.sum(self.residual_norms.astype(np.float64) ** 2))


def residual_norms(vectors: np.ndarray, centroids: np.ndarray, ids: np.ndarray) -> np.ndarray:
    diff = vectors.astype(np.float64) - centroids[ids].astype(np.float64)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff)).astype(np.float32)


def assign(corpus: TokenVectorCorpus, codebook: TokenPartitionedCodebook, threads: int = 1) -> Assignment:
    """Nearest centroid for every vector, searched only within its own token's range."""
    groups = group_by_token(corpus)
    for t in groups.token_ids:
        codebook.token_range(int(t))
    ids = np.empty(corpus.n_vectors, dtype=np.uint32)

    def job(i):
        rows = groups.rows(i)
        lo, hi = codebook.token_range(int(groups.token_ids[i]))
        if hi - lo == 1:
            ids[rows] = lo
        else:
            labels, _ = nearest_centroids(corpus.vectors[rows], codebook.centroids[lo:hi])
            ids[rows] = lo + labels
        return rows.size * (hi - lo)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ops = sum(pool.map(job, range(groups.token_ids.size)))
    else:
        ops = sum(job(i) for i in range(groups.token_ids.size))
    norms = residual_norms(corpus.vectors, codebook.centroids, ids)
    return Assignment(ids, norms, int(ops))


# ---------------------------------------------------------------------------
# flat baseline


def baseline_kmeans(
    vectors: np.ndarray,
    k: int,
    iterations: int = 10,
    seed: int = 0,
    train_factor: int = TRAIN_POINTS_PER_CENTROID,
) -> KMeansResult:
    """Global k-means ignoring token identity, on at most ``train_factor * k`` sampled rows."""
    rng = np.random.default_rng(seed)
    n = vectors.shape[0]
    if n > train_factor * k:
        vectors = vectors[np.sort(rng.choice(n, size=train_factor * k, replace=False))]
    return lloyd(vectors, k, iterations, rng, normalize=True)


def baseline_assign(vectors: np.ndarray, centroids: np.ndarray) -> Assignment:
    labels, _ = nearest_centroids(vectors, centroids)
    ids = labels.astype(np.uint32)
    return Assignment(ids, residual_norms(vectors, centroids, ids), vectors.shape[0] * centroids.shape[0])


__all__ = [
    "Assignment",
    "AllocationPlan",
    "Category",
    "TokenPartitionedCodebook",
    "TokenStats",
    "allocate",
    "assign",
    "baseline_assign",
    "baseline_kmeans",
    "cluster_token",
    "compute_token_stats",
    "damped_weight",
    "ideal_allocation",
    "speedup_lower_bound",
    "train",
    "unit_rows",
]
