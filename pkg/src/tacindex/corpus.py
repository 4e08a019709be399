"""Token-level embedding collections, queries, relevance judgments, run files.

On-disk layout of an embedding collection (a directory)::

    embeddings.meta   UTF-8 ``key: value`` lines (dim, n_vectors, n_docs, ...)
    embeddings.bin    16-byte header + little-endian float32 rows, row-major
    token_ids.bin     little-endian uint32, one per row
    doc_offsets.bin   little-endian uint64, n_docs + 1 entries
    ids.txt           optional, one external id per document / query

The header is ``b"TACEMB\\0\\0"`` followed by a uint32 version and a uint32
reserved word.
"""

from __future__ import annotations

import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CorpusFormatError,
    IdMismatchError,
    MalformedHeaderError,
    NonMonotoneOffsetsError,
    NormalizationError,
    QrelsFormatError,
    SizeMismatchError,
    TokenRangeError,
    UsageError,
)

logger = logging.getLogger(__name__)

MAGIC = b"TACEMB\x00\x00"
VERSION = 1
HEADER = struct.Struct("<8sII")
NORM_TOLERANCE = 1e-3
META_NAME = "embeddings.meta"


def _check_offsets(offsets: np.ndarray, n_rows: int) -> None:
    if offsets.ndim != 1 or offsets.size < 2:
        raise NonMonotoneOffsetsError("offsets need at least two entries")
    if offsets[0] != 0 or offsets[-1] != n_rows:
        raise NonMonotoneOffsetsError(
            f"offsets must start at 0 and end at {n_rows}, got [{offsets[0]}, .., {offsets[-1]}]"
        )
    steps = np.diff(offsets.astype(np.int64))
    if np.any(steps < 0):
        raise NonMonotoneOffsetsError("offsets are not monotonically non-decreasing")
    if np.any(steps == 0):
        raise NonMonotoneOffsetsError("empty document or query in offsets")


def _check_norms(vectors: np.ndarray, renormalize: bool) -> np.ndarray:
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    bad = np.abs(norms - 1.0) > NORM_TOLERANCE
    if not bad.any():
        return vectors
    if not renormalize:
        first = int(np.flatnonzero(bad)[0])
        raise NormalizationError(
            f"{int(bad.sum())} rows are not unit norm (row {first} has norm {norms[first]:.6f})"
        )
    if np.any(norms == 0):
        raise NormalizationError("cannot renormalize an all-zero row")
    return (vectors / norms[:, None]).astype(np.float32)


@dataclass(eq=False)
class TokenVectorCorpus:
    """All token embeddings of a collection with token identity and document bounds.

    Immutable after construction; safe to share across threads.
    """

    vectors: np.ndarray
    token_ids: np.ndarray
    doc_offsets: np.ndarray
    vocab_size: int
    doc_ids: list[str] | None = None
    renormalize: bool = False
    check_norms: bool = True

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.token_ids = np.ascontiguousarray(self.token_ids, dtype=np.uint32)
        self.doc_offsets = np.ascontiguousarray(self.doc_offsets, dtype=np.uint64)
        if self.vectors.ndim != 2 or self.vectors.shape[1] < 1:
            raise CorpusFormatError(f"vectors must be a 2-D matrix, got shape {self.vectors.shape}")
        n = self.vectors.shape[0]
        if n == 0:
            raise CorpusFormatError("corpus is empty")
        if self.token_ids.shape != (n,):
            raise SizeMismatchError(f"{self.token_ids.size} token ids for {n} vectors")
        _check_offsets(self.doc_offsets, n)
        if self.vocab_size < 1 or int(self.token_ids.max()) >= self.vocab_size:
            raise TokenRangeError(
                f"token id {int(self.token_ids.max())} outside vocabulary of size {self.vocab_size}"
            )
        if self.doc_ids is not None and len(self.doc_ids) != self.n_docs:
            raise SizeMismatchError(f"{len(self.doc_ids)} external ids for {self.n_docs} documents")
        if self.check_norms:
            self.vectors = _check_norms(self.vectors, self.renormalize)
        self.vectors.setflags(write=False)
        self.token_ids.setflags(write=False)
        self.doc_offsets.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_vectors(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_docs(self) -> int:
        return self.doc_offsets.size - 1

    @cached_property
    def doc_lengths(self) -> np.ndarray:
        return np.diff(self.doc_offsets.astype(np.int64))

    @cached_property
    def doc_of_row(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_docs, dtype=np.uint32), self.doc_lengths)

    @cached_property
    def token_counts(self) -> np.ndarray:
        """Dense occurrence count per vocabulary entry."""
        return np.bincount(self.token_ids, minlength=self.vocab_size).astype(np.int64)

    def document(self, d: int) -> np.ndarray:
        lo, hi = int(self.doc_offsets[d]), int(self.doc_offsets[d + 1])
        return self.vectors[lo:hi]

    def external_id(self, d: int) -> str:
        return self.doc_ids[d] if self.doc_ids is not None else str(d)

    @cached_property
    def internal_ids(self) -> dict[str, int]:
        return {self.external_id(d): d for d in range(self.n_docs)}


def token_histogram(corpus: TokenVectorCorpus) -> dict[int, int]:
    """Occurrence count per token id present in the corpus."""
    counts = corpus.token_counts
    present = np.flatnonzero(counts)
    return {int(t): int(counts[t]) for t in present}


def top_k_share(histogram: Mapping[int, int], k: int = 100) -> float:
    """Fraction of all vectors covered by the ``k`` most frequent tokens."""
    counts = sorted(histogram.values(), reverse=True)
    total = sum(counts)
    return sum(counts[:k]) / total if total else 0.0


@dataclass(eq=False)
class QuerySet:
    queries: list[np.ndarray]
    ids: list[str]
    max_tokens: int = 32
    renormalize: bool = False

    def __post_init__(self):
        if len(self.queries) != len(self.ids):
            raise SizeMismatchError(f"{len(self.ids)} ids for {len(self.queries)} queries")
        if len(set(self.ids)) != len(self.ids):
            raise CorpusFormatError("duplicate query ids")
        dims = {q.shape[1] for q in self.queries if q.ndim == 2}
        if len(dims) > 1:
            raise CorpusFormatError(f"queries disagree on dimension: {sorted(dims)}")
        cleaned = []
        for qid, q in zip(self.ids, self.queries):
            q = np.ascontiguousarray(q, dtype=np.float32)
            if q.ndim != 2 or not 1 <= q.shape[0] <= self.max_tokens:
                raise CorpusFormatError(
                    f"query {qid} has {q.shape[0] if q.ndim == 2 else '?'} tokens, "
                    f"expected 1..{self.max_tokens}"
                )
            cleaned.append(_check_norms(q, self.renormalize))
        self.queries = cleaned

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(zip(self.ids, self.queries))

    @property
    def dim(self) -> int:
        return self.queries[0].shape[1]


# ---------------------------------------------------------------------------
# binary files


def _read_meta(meta_path: Path) -> dict[str, str]:
    meta = {}
    try:
        text = meta_path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise CorpusFormatError(f"missing metadata file {meta_path}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise CorpusFormatError(f"{meta_path}:{lineno}: expected 'key: value'")
        meta[key.strip()] = value.strip()
    return meta


def _meta_int(meta: Mapping[str, str], key: str) -> int:
    try:
        return int(meta[key])
    except KeyError as exc:
        raise CorpusFormatError(f"metadata is missing '{key}'") from exc
    except ValueError as exc:
        raise CorpusFormatError(f"metadata '{key}' is not an integer: {meta[key]!r}") from exc


def _read_raw(path: Path, dtype, count: int, what: str, offset: int = 0) -> np.ndarray:
    if not path.exists():
        raise CorpusFormatError(f"missing {what} file {path}")
    expected = count * np.dtype(dtype).itemsize
    actual = path.stat().st_size - offset
    if actual != expected:
        raise SizeMismatchError(f"{what}: expected {expected} payload bytes, found {actual}")
    return np.fromfile(path, dtype=dtype, count=count, offset=offset)


def write_header(fh) -> None:
    fh.write(HEADER.pack(MAGIC, VERSION, 0))


def check_header(raw: bytes, path) -> None:
    if len(raw) < HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, _ = HEADER.unpack(raw[: HEADER.size])
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")


def _resolve_meta(path) -> Path:
    path = Path(path)
    return path / META_NAME if path.is_dir() else path


def _load_arrays(path, kind: str):
    meta_path = _resolve_meta(path)
    meta = _read_meta(meta_path)
    base = meta_path.parent
    if meta.get("kind", "corpus") != kind:
        raise CorpusFormatError(f"{meta_path} holds '{meta.get('kind')}', expected '{kind}'")
    dim = _meta_int(meta, "dim")
    n = _meta_int(meta, "n_vectors")
    d = _meta_int(meta, "n_docs")
    if dim < 1 or n < 1 or d < 1:
        raise CorpusFormatError("dim, n_vectors and n_docs must be positive")
    emb_path = base / meta.get("embeddings", "embeddings.bin")
    if not emb_path.exists():
        raise CorpusFormatError(f"missing embeddings file {emb_path}")
    with open(emb_path, "rb") as fh:
        check_header(fh.read(HEADER.size), emb_path)
    vectors = _read_raw(emb_path, "<f4", n * dim, "embeddings", HEADER.size).reshape(n, dim)
    offsets = _read_raw(base / meta.get("doc_offsets", "doc_offsets.bin"), "<u8", d + 1, "doc_offsets")
    token_ids = None
    if "token_ids" in meta:
        token_ids = _read_raw(base / meta["token_ids"], "<u4", n, "token_ids")
    ids = None
    if "ids" in meta:
        ids = (base / meta["ids"]).read_text(encoding="utf-8").splitlines()
    return meta, vectors, token_ids, offsets, ids


def load_corpus(path, renormalize: bool = False) -> TokenVectorCorpus:
    """Load and validate a corpus directory (or its ``embeddings.meta`` file)."""
    meta, vectors, token_ids, offsets, ids = _load_arrays(path, "corpus")
    if token_ids is None:
        raise CorpusFormatError("corpus metadata does not declare a token_ids file")
    corpus = TokenVectorCorpus(
        vectors=vectors,
        token_ids=token_ids,
        doc_offsets=offsets,
        vocab_size=_meta_int(meta, "vocab_size"),
        doc_ids=ids,
        renormalize=renormalize,
    )
    _ = corpus.token_counts
    logger.info("loaded corpus: %d docs, %d vectors, dim %d", corpus.n_docs, corpus.n_vectors, corpus.dim)
    return corpus


def load_queries(path, max_tokens: int = 32, renormalize: bool = False) -> QuerySet:
    _, vectors, _, offsets, ids = _load_arrays(path, "queries")
    _check_offsets(offsets, vectors.shape[0])
    n_q = offsets.size - 1
    if ids is None:
        ids = [str(i) for i in range(n_q)]
    bounds = offsets.astype(np.int64)
    queries = [vectors[bounds[i] : bounds[i + 1]] for i in range(n_q)]
    return QuerySet(queries, ids, max_tokens=max_tokens, renormalize=renormalize)


def _write_arrays(path, kind, vectors, offsets, token_ids=None, vocab_size=None, ids=None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    with open(out / "embeddings.bin", "wb") as fh:
        write_header(fh)
        fh.write(vectors.tobytes())
    np.ascontiguousarray(offsets, dtype="<u8").tofile(out / "doc_offsets.bin")
    lines = [
        f"kind: {kind}",
        f"version: {VERSION}",
        f"dim: {vectors.shape[1]}",
        f"n_vectors: {vectors.shape[0]}",
        f"n_docs: {len(offsets) - 1}",
        "embeddings: embeddings.bin",
        "doc_offsets: doc_offsets.bin",
    ]
    if token_ids is not None:
        np.ascontiguousarray(token_ids, dtype="<u4").tofile(out / "token_ids.bin")
        lines += [f"vocab_size: {vocab_size}", "token_ids: token_ids.bin"]
    if ids is not None:
        (out / "ids.txt").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
        lines.append("ids: ids.txt")
    (out / META_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def save_corpus(corpus: TokenVectorCorpus, path) -> Path:
    return _write_arrays(
        path, "corpus", corpus.vectors, corpus.doc_offsets,
        token_ids=corpus.token_ids, vocab_size=corpus.vocab_size, ids=corpus.doc_ids,
    )


def save_queries(queries: QuerySet, path) -> Path:
    lengths = [q.shape[0] for q in queries.queries]
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.uint64)
    return _write_arrays(path, "queries", np.vstack(queries.queries), offsets, ids=queries.ids)


# ---------------------------------------------------------------------------
# qrels and runs


@dataclass
class Qrels:
    judgments: dict[str, dict[str, int]]
    unknown_docs: set[tuple[str, str]] = field(default_factory=set)

    def relevant(self, qid: str) -> set[str]:
        return {d for d, g in self.judgments.get(qid, {}).items() if g >= 1}

    @property
    def query_ids(self) -> list[str]:
        return list(self.judgments)


def load_qrels(path, known_doc_ids: Iterable[str] | None = None) -> Qrels:
    """Read ``query_id<TAB>doc_id<TAB>grade`` lines.

    Judgments naming documents outside ``known_doc_ids`` are kept and flagged
    in ``Qrels.unknown_docs``.
    """
    known = set(known_doc_ids) if known_doc_ids is not None else None
    judgments: dict[str, dict[str, int]] = defaultdict(dict)
    unknown = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise QrelsFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            qid, did, grade = parts
            try:
                g = int(grade)
            except ValueError as exc:
                raise QrelsFormatError(f"{path}:{lineno}: grade {grade!r} is not an integer") from exc
            if g < 1:
                continue
            judgments[qid][did] = g
            if known is not None and did not in known:
                unknown.add((qid, did))
    if unknown:
        logger.warning("%d judgments reference documents missing from the corpus", len(unknown))
    return Qrels(dict(judgments), unknown)


def write_qrels(path, judgments: Mapping[str, Mapping[str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, docs in judgments.items():
            for did, grade in docs.items():
                fh.write(f"{qid}\t{did}\t{grade}\n")


def write_run(path, rankings: Iterable[tuple[str, Sequence[tuple[str, float]]]]) -> None:
    """Write ``query_id<TAB>doc_id<TAB>rank<TAB>score`` lines, ranks from 1."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid, ranked in rankings:
            for rank, (did, score) in enumerate(ranked, 1):
                fh.write(f"{qid}\t{did}\t{rank}\t{score:.6f}\n")


def read_run(path) -> dict[str, list[str]]:
    """Ranked doc ids per query, ordered by the rank column."""
    rows: dict[str, list[tuple[int, str]]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise IdMismatchError(f"{path}:{lineno}: expected 4 tab-separated fields")
            try:
                rows[parts[0]].append((int(parts[2]), parts[1]))
            except ValueError as exc:
                raise IdMismatchError(f"{path}:{lineno}: bad rank {parts[2]!r}") from exc
    return {qid: [d for _, d in sorted(r)] for qid, r in rows.items()}


def require_same_dim(corpus: TokenVectorCorpus, queries: QuerySet) -> None:
    if corpus.dim != queries.dim:
        raise UsageError(f"query dim {queries.dim} != corpus dim {corpus.dim}")
