"""Query execution: centroid-only gather, truncation and pruning, PQ refine."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptRecordError, UsageError
from .pq import DistanceTables, build_distance_tables, residual_scores, score_tokens


@dataclass(frozen=True)
class SearchParams:
    kappa_c: int = 40
    kappa_d: int = 1000
    alpha: float = 0.4
    ef_search: int | None = None
    k: int = 10
    # None: linear centroid scan only when the beam covers every centroid
    exhaustive_centroids: bool | None = None

    def __post_init__(self):
        if self.kappa_c < 1:
            raise UsageError("kappa_c must be >= 1")
        if self.k < 1 or self.kappa_d < self.k:
            raise UsageError(f"need 1 <= k <= kappa_d, got k={self.k}, kappa_d={self.kappa_d}")
        if not 0 < self.alpha <= 1:
            raise UsageError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.ef_search is not None and self.ef_search < self.kappa_c:
            raise UsageError("ef_search must be >= kappa_c")

    @property
    def ef(self) -> int:
        return self.ef_search if self.ef_search is not None else math.ceil(1.5 * self.kappa_c)


@dataclass
class CandidateSet:
    """Documents hit by at least one retrieved centroid, with partial scores."""

    doc_ids: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return self.doc_ids.size

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.doc_ids.tolist(), self.scores.tolist()))


@dataclass
class SearchResult:
    doc_ids: np.ndarray
    scores: np.ndarray
    timings_us: dict[str, float] = field(default_factory=dict)
    n_gathered: int = 0
    n_pruned: int = 0
    counters: dict[str, int] = field(default_factory=dict)


def rank(doc_ids: np.ndarray, scores: np.ndarray, k: int | None = None):
    """Order by score descending, doc id ascending; keep the first ``k``."""
    order = np.lexsort((doc_ids, -scores))
    if k is not None:
        order = order[:k]
    return doc_ids[order], scores[order]


def gather(query: np.ndarray, index, params: SearchParams, counters: dict | None = None) -> CandidateSet:
    """Approximate MaxSim from centroid interactions only.

    For each query token the best retrieved centroid score per document is
    kept; those maxima are summed across query tokens.
    """
    lists = index.lists
    total = np.zeros(index.n_docs, dtype=np.float32)
    hit = np.zeros(index.n_docs, dtype=bool)
    scanned = 0
    for q in np.asarray(query, dtype=np.float32):
        cids, cscores = index.graph.search(q, params.kappa_c, params.ef, params.exhaustive_centroids)
        starts, ends = lists.offsets[cids], lists.offsets[cids + 1]
        lens = ends - starts
        if lens.sum() == 0:
            continue
        docs = np.concatenate([lists.doc_ids[s:e] for s, e in zip(starts.tolist(), ends.tolist())])
        sc = np.repeat(cscores, lens)
        # centroids arrive best-first, so a document's first posting carries its max
        udocs, first = np.unique(docs, return_index=True)
        total[udocs] += sc[first]
        hit[udocs] = True
        scanned += docs.size
    if counters is not None:
        counters["postings_scanned"] = counters.get("postings_scanned", 0) + scanned
    ids = np.flatnonzero(hit)
    return CandidateSet(ids, total[ids])


def truncate_and_prune(cands: CandidateSet, kappa_d: int, alpha: float) -> CandidateSet:
    """Top ``kappa_d`` by partial score, then drop documents below ``alpha`` times the best.

    The relative threshold only applies when the best partial score is positive.
    """
    ids, scores = rank(cands.doc_ids, cands.scores, kappa_d)
    if scores.size and scores[0] > 0:
        keep = scores >= alpha * scores[0]
        ids, scores = ids[keep], scores[keep]
    return CandidateSet(ids, scores)


def _token_index(doc_offsets: np.ndarray, docs: np.ndarray):
    starts = doc_offsets[docs]
    lens = doc_offsets[docs + 1] - starts
    seg = np.concatenate([[0], np.cumsum(lens)[:-1]])
    idx = np.arange(lens.sum()) - np.repeat(seg - starts, lens)
    return idx, seg


def _batches(lens: np.ndarray, batch_tokens: int):
    """Consecutive (lo, hi) document ranges holding about ``batch_tokens`` tokens each."""
    cum = np.cumsum(lens)
    lo = 0
    while lo < lens.size:
        base = cum[lo - 1] if lo else 0
        hi = int(np.searchsorted(cum, base + batch_tokens, side="right"))
        hi = min(max(hi, lo + 1), lens.size)
        yield lo, hi
        lo = hi


def _check_batch(index, docs, cids, codes, idx, seg):
    bad_c = cids >= index.codebook.size
    bad_k = codes.max(axis=1) >= index.codec.K if codes.size else np.zeros(0, dtype=bool)
    bad = bad_c | bad_k
    if bad.any():
        pos = int(np.flatnonzero(bad)[0])
        d = int(docs[np.searchsorted(seg, pos, side="right") - 1])
        reason = "centroid id out of range" if bad_c[pos] else "PQ code out of range"
        raise CorruptRecordError(d, reason)


def maxsim_compressed(query: np.ndarray, docs: np.ndarray, index, tables: DistanceTables | None = None,
                      batch_tokens: int = 1 << 16) -> np.ndarray:
    """MaxSim of ``query`` against compressed documents, in document batches.

    Per batch: one pass adds up centroid scores, a second adds the scaled
    residual term from the distance tables.
    """
    query = np.asarray(query, dtype=np.float32)
    docs = np.asarray(docs, dtype=np.int64)
    if tables is None:
        tables = build_distance_tables(query, index.codec)
    comp = index.compressed
    centroids = index.codebook.centroids
    out = np.empty(docs.size, dtype=np.float32)
    lens = comp.doc_offsets[docs + 1] - comp.doc_offsets[docs]
    for lo, hi in _batches(lens, batch_tokens):
        batch = docs[lo:hi]
        idx, seg = _token_index(comp.doc_offsets, batch)
        cids = comp.centroid_ids[idx]
        codes = comp.codes[idx]
        _check_batch(index, batch, cids, codes, idx, seg)
        tok = query @ centroids[cids].T
        tok += residual_scores(codes, comp.norms[idx], tables).T
        out[lo:hi] = np.maximum.reduceat(tok, seg, axis=1).sum(axis=0)
    return out


def refine_document(query: np.ndarray, doc_id: int, index, tables: DistanceTables) -> float:
    """Single-document refine over its contiguous record."""
    rec = index.compressed.record(doc_id)
    if rec.centroid_ids.size and int(rec.centroid_ids.max()) >= index.codebook.size:
        raise CorruptRecordError(doc_id, "centroid id out of range")
    cent = query @ index.codebook.centroids[rec.centroid_ids].T
    return float(score_tokens(rec, tables, cent, doc_id).max(axis=1).sum())


def refine(query: np.ndarray, cands: CandidateSet, index, k: int):
    """Full approximate MaxSim for the candidates; top ``k`` (ids, scores)."""
    if len(cands) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float32)
    scores = maxsim_compressed(query, cands.doc_ids, index)
    return rank(cands.doc_ids.astype(np.int64), scores, k)


def search(query: np.ndarray, index, params: SearchParams) -> SearchResult:
    counters: dict[str, int] = {}
    index.graph.take_dot_count()
    t0 = time.perf_counter_ns()
    gathered = gather(query, index, params, counters)
    t1 = time.perf_counter_ns()
    pruned = truncate_and_prune(gathered, params.kappa_d, params.alpha)
    t2 = time.perf_counter_ns()
    ids, scores = refine(query, pruned, index, params.k)
    t3 = time.perf_counter_ns()
    counters["centroid_dots"] = index.graph.take_dot_count()
    counters["refined_tokens"] = int(np.sum(index.compressed.doc_offsets[pruned.doc_ids + 1]
                                            - index.compressed.doc_offsets[pruned.doc_ids]))
    timings = {
        "gather_us": (t1 - t0) / 1e3,
        "prune_us": (t2 - t1) / 1e3,
        "refine_us": (t3 - t2) / 1e3,
        "total_us": (t3 - t0) / 1e3,
    }
    return SearchResult(ids, scores, timings, len(gathered), len(pruned), counters)


def maxsim_scores(query: np.ndarray, vectors: np.ndarray, doc_offsets: np.ndarray,
                  docs: np.ndarray | None = None, batch_tokens: int = 1 << 16) -> np.ndarray:
    """Exact MaxSim against uncompressed documents (all, or the listed ``docs``)."""
    query = np.asarray(query, dtype=np.float32)
    offsets = np.asarray(doc_offsets, dtype=np.int64)
    docs = np.arange(offsets.size - 1) if docs is None else np.asarray(docs, dtype=np.int64)
    out = np.empty(docs.size, dtype=np.float32)
    lens = offsets[docs + 1] - offsets[docs]
    for lo, hi in _batches(lens, batch_tokens):
        idx, seg = _token_index(offsets, docs[lo:hi])
        tok = query @ vectors[idx].T
        out[lo:hi] = np.maximum.reduceat(tok, seg, axis=1).sum(axis=0)
    return out


def exhaustive_maxsim(query: np.ndarray, corpus=None, k: int | None = None, candidates=None,
                      vectors: np.ndarray | None = None, doc_offsets: np.ndarray | None = None):
    """Ground-truth ranking by exact MaxSim.

    Pass a corpus, or raw ``vectors`` + ``doc_offsets``. With ``candidates``
    only those documents are scored (rerank mode).
    """
    if corpus is not None:
        vectors, doc_offsets = corpus.vectors, corpus.doc_offsets
    if vectors is None or doc_offsets is None:
        raise UsageError("exhaustive_maxsim needs a corpus or vectors + doc_offsets")
    docs = np.arange(len(doc_offsets) - 1) if candidates is None else np.asarray(candidates, dtype=np.int64)
    scores = maxsim_scores(query, vectors, doc_offsets, docs)
    return rank(docs, scores, k)
