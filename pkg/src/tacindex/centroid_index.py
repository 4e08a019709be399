"""Proximity graph over centroids and per-centroid inverted document lists.

The graph is a hierarchical navigable small world (HNSW) graph scored by
inner product; with unit-norm centroids that ranks exactly like cosine.
Searches whose beam covers the whole centroid set fall back to a linear
scan, which is also the reference every graph search is tested against.
"""

from __future__ import annotations

import heapq
import logging
import math
import struct
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from .binio import BlobReader
from .errors import SizeMismatchError, UsageError

logger = logging.getLogger(__name__)

_GRAPH_MAGIC = b"TACHNS\x00\x01"
_LISTS_MAGIC = b"TACINV\x00\x01"


def top_by_score(ids: np.ndarray, scores: np.ndarray, k: int):
    """The ``k`` best (id, score) pairs, score descending then id ascending."""
    order = np.lexsort((ids, -scores))[:k]
    return ids[order], scores[order]


class CentroidGraph:
    """Layered adjacency over centroid ids.

    ``layers[l]`` maps node id -> neighbour id array; layer 0 holds every node.
    """

    def __init__(self, vectors: np.ndarray, m: int = 32, ef_construction: int = 200):
        if m < 2:
            raise UsageError("graph degree m must be >= 2")
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.m = m
        self.ef_construction = ef_construction
        self.levels = np.zeros(self.size, dtype=np.int64)
        self.layers: list[dict[int, np.ndarray]] = [{}]
        self.entry = 0
        self._local = threading.local()

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def max_level(self) -> int:
        return len(self.layers) - 1

    def cap(self, layer: int) -> int:
        return 2 * self.m if layer == 0 else self.m

    def neighbors(self, node: int, layer: int = 0) -> np.ndarray:
        return self.layers[layer].get(node, _EMPTY)

    # -- search ---------------------------------------------------------------

    def _visit_marks(self):
        # per-thread visited stamps so concurrent searches never share state
        local = self._local
        if getattr(local, "mark", None) is None or local.mark.size != self.size:
            local.mark = np.zeros(self.size, dtype=np.int64)
            local.stamp = 0
        local.stamp += 1
        return local.mark, local.stamp

    def _count(self, n: int) -> None:
        self._local.dots = getattr(self._local, "dots", 0) + n

    def take_dot_count(self) -> int:
        """Centroid dot products computed by this thread since the last call."""
        n = getattr(self._local, "dots", 0)
        self._local.dots = 0
        return n

    def _search_layer(self, q: np.ndarray, entry_points, ef: int, layer: int):
        """Beam search on one layer; returns [(score, id)] best first."""
        mark, stamp = self._visit_marks()
        vecs, adj = self.vectors, self.layers[layer]
        eps = np.asarray(entry_points, dtype=np.int64)
        mark[eps] = stamp
        sims = (vecs[eps] @ q).tolist()
        self._count(len(sims))
        cand = [(-s, int(e)) for s, e in zip(sims, eps)]
        heapq.heapify(cand)
        best = [(s, int(e)) for s, e in zip(sims, eps)]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)
        while cand:
            neg, c = heapq.heappop(cand)
            if len(best) >= ef and -neg < best[0][0]:
                break
            nbrs = adj.get(c)
            if nbrs is None or nbrs.size == 0:
                continue
            new = nbrs[mark[nbrs] != stamp]
            if new.size == 0:
                continue
            mark[new] = stamp
            self._count(new.size)
            for s, n in zip((vecs[new] @ q).tolist(), new.tolist()):
                if len(best) < ef or s > best[0][0]:
                    heapq.heappush(cand, (-s, n))
                    heapq.heappush(best, (s, n))
                    if len(best) > ef:
                        heapq.heappop(best)
        return sorted(best, key=lambda p: (-p[0], p[1]))

    def _descend(self, q: np.ndarray, down_to: int) -> int:
        ep = self.entry
        for layer in range(self.max_level, down_to, -1):
            ep = self._search_layer(q, [ep], 1, layer)[0][1]
        return ep

    def search(self, q: np.ndarray, k: int, ef: int, exhaustive: bool | None = None):
        """Top-``k`` (ids, scores) for one query vector.

        ``exhaustive=None`` scans linearly whenever ``ef`` or ``k`` reaches
        the graph size; ``False`` always walks the graph.
        """
        q = np.asarray(q, dtype=np.float32)
        k = min(k, self.size)
        if exhaustive is None:
            exhaustive = ef >= self.size or k >= self.size
        if exhaustive:
            self._count(self.size)
            return top_by_score(np.arange(self.size), self.vectors @ q, k)
        if ef < k:
            raise UsageError(f"ef_search ({ef}) must be >= k ({k})")
        ep = self._descend(q, 0)
        found = self._search_layer(q, [ep], ef, 0)[:k]
        return (
            np.array([n for _, n in found], dtype=np.int64),
            np.array([s for s, _ in found], dtype=np.float32),
        )

    # -- construction ---------------------------------------------------------

    def _select(self, base: np.ndarray, cand_ids: np.ndarray, cand_sims: np.ndarray, m: int) -> np.ndarray:
        """Diversity heuristic: keep a candidate only if it is closer to the
        base than to every neighbour already kept."""
        order = np.lexsort((cand_ids, -cand_sims))
        ids, sims = cand_ids[order], cand_sims[order]
        if ids.size <= 1:
            return ids
        pair = self.vectors[ids] @ self.vectors[ids].T
        alive = np.ones(ids.size, dtype=bool)
        kept = []
        i = 0
        while len(kept) < m:
            rest = np.flatnonzero(alive[i:])
            if rest.size == 0:
                break
            i += int(rest[0])
            kept.append(i)
            alive[i] = False
            alive &= pair[i] < sims
            i += 1
            if i >= ids.size:
                break
        return ids[kept]

    def _connect(self, node: int, found, layer: int) -> None:
        adj = self.layers[layer]
        cand_ids = np.array([n for _, n in found], dtype=np.int64)
        cand_sims = np.array([s for s, _ in found], dtype=np.float32)
        chosen = self._select(self.vectors[node], cand_ids, cand_sims, self.m)
        adj[node] = chosen
        cap = self.cap(layer)
        for e in chosen.tolist():
            cur = adj.get(e, _EMPTY)
            grown = np.append(cur, node)
            if grown.size > cap:
                grown = self._select(self.vectors[e], grown, self.vectors[grown] @ self.vectors[e], cap)
            adj[e] = grown

    def build(self, seed: int = 0) -> "CentroidGraph":
        rng = np.random.default_rng(seed)
        ml = 1.0 / math.log(self.m)
        self.levels = np.floor(-np.log(1.0 - rng.random(self.size)) * ml).astype(np.int64)
        self.layers = [{} for _ in range(int(self.levels[0]) + 1)]
        self.entry = 0
        for layer in range(len(self.layers)):
            self.layers[layer][0] = _EMPTY
        for node in range(1, self.size):
            q = self.vectors[node]
            level = int(self.levels[node])
            top = self.max_level
            ep = self._descend(q, level) if top > level else self.entry
            eps = [ep]
            for layer in range(min(level, top), -1, -1):
                found = self._search_layer(q, eps, self.ef_construction, layer)
                self._connect(node, found, layer)
                eps = [n for _, n in found]
            if level > top:
                for _ in range(top + 1, level + 1):
                    self.layers.append({node: _EMPTY})
                self.entry = node
        self._repair_reachability()
        return self

    def reachable(self) -> np.ndarray:
        seen = np.zeros(self.size, dtype=bool)
        seen[self.entry] = True
        queue = deque([self.entry])
        adj = self.layers[0]
        while queue:
            nbrs = adj.get(queue.popleft(), _EMPTY)
            new = nbrs[~seen[nbrs]]
            seen[new] = True
            queue.extend(new.tolist())
        return seen

    def _repair_reachability(self) -> None:
        """Link every node unreachable on layer 0 from its most similar reachable node."""
        adj = self.layers[0]
        cap = self.cap(0)
        seen = self.reachable()
        repaired = 0
        while not seen.all():
            node = int(np.flatnonzero(~seen)[0])
            reach = np.flatnonzero(seen)
            sims = self.vectors[reach] @ self.vectors[node]
            for r in reach[np.lexsort((reach, -sims))].tolist():
                cur = adj.get(r, _EMPTY)
                if cur.size < cap:
                    adj[r] = np.append(cur, node)
                    break
            else:
                r = int(reach[np.argmax(sims)])
                cur = adj[r]
                worst = int(np.argmin(self.vectors[cur] @ self.vectors[r]))
                adj[r] = np.append(np.delete(cur, worst), node)
            repaired += 1
            seen = self.reachable()
        if repaired:
            logger.info("linked %d unreachable centroids into the graph", repaired)

    # -- persistence ------------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<8sQIIIQ", _GRAPH_MAGIC, self.size, self.m, self.ef_construction,
                                 self.max_level, self.entry))
            fh.write(self.levels.astype("<u1").tobytes())
            for adj in self.layers:
                nodes = np.array(sorted(adj), dtype=np.int64)
                lens = np.array([adj[n].size for n in nodes.tolist()], dtype=np.int64)
                offsets = np.concatenate([[0], np.cumsum(lens)])
                flat = np.concatenate([adj[n] for n in nodes.tolist()]) if nodes.size else _EMPTY
                fh.write(struct.pack("<Q", nodes.size))
                fh.write(nodes.astype("<u4").tobytes())
                fh.write(offsets.astype("<u8").tobytes())
                fh.write(flat.astype("<u4").tobytes())

    @classmethod
    def load(cls, path, vectors: np.ndarray) -> "CentroidGraph":
        r = BlobReader(path)
        size, m, ef_c, max_level, entry = r.header(_GRAPH_MAGIC, "QIIIQ")
        if size != vectors.shape[0]:
            raise SizeMismatchError(f"graph has {size} nodes, codebook has {vectors.shape[0]} centroids")
        g = cls(vectors, m, ef_c)
        g.levels = r.array("<u1", size).astype(np.int64)
        g.layers = []
        for _ in range(max_level + 1):
            (n_nodes,) = struct.unpack_from("<Q", r.buf, r.pos)
            r.pos += 8
            nodes = r.array("<u4", n_nodes).astype(np.int64)
            offsets = r.array("<u8", n_nodes + 1).astype(np.int64)
            flat = r.array("<u4", int(offsets[-1])).astype(np.int64)
            g.layers.append({n: flat[offsets[i] : offsets[i + 1]] for i, n in enumerate(nodes.tolist())})
        r.done()
        g.entry = int(entry)
        return g


_EMPTY = np.zeros(0, dtype=np.int64)


def build_graph(centroids: np.ndarray, m: int = 32, ef_construction: int = 200, seed: int = 0) -> CentroidGraph:
    """Insert centroids in id order; deterministic for a given seed."""
    if centroids.shape[0] < 1:
        raise UsageError("cannot build a graph over zero centroids")
    return CentroidGraph(centroids, m, ef_construction).build(seed)


def search_centroids(graph: CentroidGraph, q: np.ndarray, k: int, ef_search: int, exhaustive: bool | None = None):
    return graph.search(q, k, ef_search, exhaustive)


# ---------------------------------------------------------------------------
# inverted lists


@dataclass(eq=False)
class InvertedLists:
    """Sorted, deduplicated document ids per centroid in CSR form."""

    offsets: np.ndarray
    doc_ids: np.ndarray

    @property
    def n_lists(self) -> int:
        return self.offsets.size - 1

    @property
    def n_postings(self) -> int:
        return self.doc_ids.size

    def __getitem__(self, centroid: int) -> np.ndarray:
        return self.doc_ids[self.offsets[centroid] : self.offsets[centroid + 1]]

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def save(self, path) -> None:
        ids = self.doc_ids.astype(np.int64)
        first = np.zeros(ids.size, dtype=bool)
        first[self.offsets[:-1][self.lengths() > 0]] = True
        deltas = ids.copy()
        inner = np.flatnonzero(~first)
        deltas[inner] = ids[inner] - ids[inner - 1]
        with open(path, "wb") as fh:
            fh.write(struct.pack("<8sQQ", _LISTS_MAGIC, self.n_lists, self.n_postings))
            fh.write(self.offsets.astype("<u8").tobytes())
            fh.write(deltas.astype("<u4").tobytes())

    @classmethod
    def load(cls, path) -> "InvertedLists":
        r = BlobReader(path)
        n_lists, n_postings = r.header(_LISTS_MAGIC, "QQ")
        offsets = r.array("<u8", n_lists + 1).astype(np.int64)
        deltas = r.array("<u4", n_postings).astype(np.int64)
        r.done()
        if offsets[-1] != n_postings:
            raise SizeMismatchError(f"{path}: offsets cover {offsets[-1]} postings, header says {n_postings}")
        # each list restarts from an absolute id
        running = np.concatenate([[0], np.cumsum(deltas)])
        before = running[offsets[:-1]]
        doc_ids = running[1:] - np.repeat(before, np.diff(offsets))
        return cls(offsets, doc_ids.astype(np.uint32))


def build_inverted_lists(centroid_ids: np.ndarray, doc_of_row: np.ndarray, n_centroids: int, n_docs: int) -> InvertedLists:
    """Document ids with at least one token assigned to each centroid."""
    keys = np.unique(centroid_ids.astype(np.int64) * n_docs + doc_of_row.astype(np.int64))
    cents = keys // n_docs
    docs = (keys % n_docs).astype(np.uint32)
    counts = np.bincount(cents, minlength=n_centroids)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return InvertedLists(offsets, docs)
