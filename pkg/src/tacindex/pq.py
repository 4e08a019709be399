"""Product quantization of normalized residuals and query-time distance tables.

Residuals ``t - c`` are divided by their norm before quantization; the norm
is stored separately as float32. Distance tables hold inner products between
query sub-vectors and PQ codewords and are laid out subspace-major, then
codeword-major, with the ``n_q`` query-token values for one codeword
contiguous (a "micro-block")::

    flat[(m * K + k) * n_q + i] = <q_i[m-th sub-vector], codebooks[m, k]>

so scoring one document token reads ``M`` contiguous micro-blocks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .binio import BlobReader, write_blob
from .errors import CorruptRecordError, SizeMismatchError, UsageError
from .kmeans import lloyd, nearest_centroids

_CODEC_MAGIC = b"TACPQC\x00\x01"
_CORPUS_MAGIC = b"TACCMP\x00\x01"


@dataclass(eq=False)
class PQCodec:
    codebooks: np.ndarray  # (M, 2**bits, sub_dim)
    bits: int = 8

    def __post_init__(self):
        self.codebooks = np.ascontiguousarray(self.codebooks, dtype=np.float32)
        if self.codebooks.ndim != 3 or self.codebooks.shape[1] != 1 << self.bits:
            raise UsageError(f"codebooks shape {self.codebooks.shape} does not match {self.bits} bits")
        if not 1 <= self.bits <= 8:
            raise UsageError("codes are stored in one byte; bits must be in 1..8")
        if not np.all(np.isfinite(self.codebooks)):
            raise UsageError("codebooks contain non-finite values")

    @property
    def M(self) -> int:
        return self.codebooks.shape[0]

    @property
    def K(self) -> int:
        return self.codebooks.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.codebooks.shape[2]

    @property
    def dim(self) -> int:
        return self.M * self.sub_dim

    @property
    def code_bytes(self) -> int:
        return self.M

    def save(self, path) -> None:
        write_blob(path, _CODEC_MAGIC, "III", (self.M, self.bits, self.sub_dim), [(self.codebooks, "<f4")])

    @classmethod
    def load(cls, path) -> "PQCodec":
        r = BlobReader(path)
        m, bits, sub_dim = r.header(_CODEC_MAGIC, "III")
        cb = r.array("<f4", m * (1 << bits) * sub_dim).reshape(m, 1 << bits, sub_dim)
        r.done()
        return cls(cb, bits)


def _split(x: np.ndarray, M: int) -> np.ndarray:
    n, dim = x.shape
    if dim % M:
        raise UsageError(f"dimension {dim} is not divisible by M={M}")
    return x.reshape(n, M, dim // M)


def normalized_residuals(vectors, centroids, centroid_ids, norms) -> np.ndarray:
    """Unit residuals; rows with zero norm stay all-zero."""
    res = vectors.astype(np.float32) - centroids[centroid_ids]
    out = np.zeros_like(res)
    nz = norms > 0
    out[nz] = res[nz] / norms[nz, None]
    return out


def train_pq(residuals: np.ndarray, M: int = 32, bits: int = 8, iterations: int = 10, seed: int = 0) -> PQCodec:
    """Per-subspace k-means on unit residuals; all-zero rows are skipped."""
    residuals = np.asarray(residuals, dtype=np.float32)
    subs = _split(residuals, M)
    keep = np.einsum("ij,ij->i", residuals, residuals) > 0
    subs = subs[keep]
    K = 1 << bits
    if subs.shape[0] < K:
        raise UsageError(f"PQ training needs at least {K} non-zero residuals, got {subs.shape[0]}")
    codebooks = np.empty((M, K, subs.shape[2]), dtype=np.float32)
    for m in range(M):
        rng = np.random.default_rng(np.random.SeedSequence([seed, m]))
        codebooks[m] = lloyd(np.ascontiguousarray(subs[:, m, :]), K, iterations, rng).centroids
    return PQCodec(codebooks, bits)


def encode_residuals(unit_residuals: np.ndarray, codec: PQCodec) -> np.ndarray:
    """Nearest codeword per subspace (ties to the lowest code); zero rows get code 0."""
    subs = _split(np.asarray(unit_residuals, dtype=np.float32), codec.M)
    codes = np.zeros(subs.shape[:2], dtype=np.uint8)
    nz = np.any(subs.reshape(subs.shape[0], -1) != 0, axis=1)
    for m in range(codec.M):
        labels, _ = nearest_centroids(np.ascontiguousarray(subs[nz, m, :]), codec.codebooks[m])
        codes[nz, m] = labels
    return codes


def decode(codes: np.ndarray, codec: PQCodec) -> np.ndarray:
    codes = np.asarray(codes)
    parts = [codec.codebooks[m][codes[:, m]] for m in range(codec.M)]
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# compressed corpus


@dataclass(frozen=True)
class DocRecord:
    centroid_ids: np.ndarray
    codes: np.ndarray
    norms: np.ndarray

    def __len__(self) -> int:
        return self.centroid_ids.size

    def to_bytes(self) -> bytes:
        return (
            self.centroid_ids.astype("<u4").tobytes()
            + np.ascontiguousarray(self.codes, dtype=np.uint8).tobytes()
            + self.norms.astype("<f4").tobytes()
        )


@dataclass(eq=False)
class CompressedCorpus:
    """Per-document ``[centroid ids | PQ codes | residual norms]`` records.

    Held in memory as flat arrays sharing one token offset table; the file
    stores each document's record contiguously.
    """

    doc_offsets: np.ndarray
    centroid_ids: np.ndarray
    codes: np.ndarray
    norms: np.ndarray

    def __post_init__(self):
        self.doc_offsets = np.asarray(self.doc_offsets, dtype=np.int64)
        self.centroid_ids = np.asarray(self.centroid_ids, dtype=np.uint32)
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        self.norms = np.asarray(self.norms, dtype=np.float32)
        n = self.centroid_ids.size
        if self.codes.ndim != 2 or self.codes.shape[0] != n or self.norms.shape != (n,):
            raise SizeMismatchError("centroid ids, codes and norms disagree on token count")
        if self.doc_offsets[0] != 0 or self.doc_offsets[-1] != n or np.any(np.diff(self.doc_offsets) <= 0):
            raise SizeMismatchError("document offsets do not partition the tokens")

    @property
    def n_docs(self) -> int:
        return self.doc_offsets.size - 1

    @property
    def M(self) -> int:
        return self.codes.shape[1]

    def record(self, d: int) -> DocRecord:
        lo, hi = self.doc_offsets[d], self.doc_offsets[d + 1]
        return DocRecord(self.centroid_ids[lo:hi], self.codes[lo:hi], self.norms[lo:hi])

    def record_bytes(self, d: int) -> int:
        return int(self.doc_offsets[d + 1] - self.doc_offsets[d]) * (8 + self.M)

    def save(self, path) -> None:
        lengths = np.diff(self.doc_offsets)
        byte_offsets = np.concatenate([[0], np.cumsum(lengths * (8 + self.M))]).astype(np.uint64)
        with open(path, "wb") as fh:
            fh.write(struct.pack("<8sQQII", _CORPUS_MAGIC, self.n_docs, self.centroid_ids.size, self.M, 0))
            fh.write(byte_offsets.astype("<u8").tobytes())
            for d in range(self.n_docs):
                fh.write(self.record(d).to_bytes())

    @classmethod
    def load(cls, path) -> "CompressedCorpus":
        r = BlobReader(path)
        n_docs, n_tokens, M, _ = r.header(_CORPUS_MAGIC, "QQII")
        byte_offsets = r.array("<u8", n_docs + 1).astype(np.int64)
        payload = np.frombuffer(r.buf, dtype=np.uint8, offset=r.pos)
        if byte_offsets[-1] != payload.size:
            raise SizeMismatchError(f"{path}: payload is {payload.size} bytes, offsets say {byte_offsets[-1]}")
        rec = 8 + M
        sizes = np.diff(byte_offsets)
        if np.any(sizes <= 0) or np.any(sizes % rec):
            bad = int(np.flatnonzero((sizes <= 0) | (sizes % rec))[0])
            raise CorruptRecordError(bad, f"record of {sizes[bad]} bytes is not a multiple of {rec}")
        lengths = sizes // rec
        doc_offsets = np.concatenate([[0], np.cumsum(lengths)])
        if doc_offsets[-1] != n_tokens:
            raise SizeMismatchError(f"{path}: records hold {doc_offsets[-1]} tokens, header says {n_tokens}")
        ids = np.empty(n_tokens, dtype=np.uint32)
        codes = np.empty((n_tokens, M), dtype=np.uint8)
        norms = np.empty(n_tokens, dtype=np.float32)
        for d in range(n_docs):
            b = int(byte_offsets[d])
            lo, hi = int(doc_offsets[d]), int(doc_offsets[d + 1])
            n = hi - lo
            ids[lo:hi] = np.frombuffer(payload, dtype="<u4", count=n, offset=b)
            codes[lo:hi] = np.frombuffer(payload, dtype=np.uint8, count=n * M, offset=b + 4 * n).reshape(n, M)
            norms[lo:hi] = np.frombuffer(payload, dtype="<f4", count=n, offset=b + (4 + M) * n)
        return cls(doc_offsets, ids, codes, norms)


def compress(vectors, doc_offsets, centroids, assignment, codec: PQCodec) -> CompressedCorpus:
    """Encode every token as (centroid id, PQ codes of its unit residual, residual norm)."""
    unit = normalized_residuals(vectors, centroids, assignment.centroid_ids, assignment.residual_norms)
    codes = encode_residuals(unit, codec)
    return CompressedCorpus(doc_offsets, assignment.centroid_ids, codes, assignment.residual_norms)


def reconstruct(compressed: CompressedCorpus, centroids: np.ndarray, codec: PQCodec) -> np.ndarray:
    """Decompressed token vectors ``c + rho * decode(codes)``."""
    return centroids[compressed.centroid_ids] + compressed.norms[:, None] * decode(compressed.codes, codec)


# ---------------------------------------------------------------------------
# distance tables


def _subspace_dots(q_sub: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """(K, n_q) inner products, summed over sub-vector components in fixed order."""
    out = codewords[:, 0:1] * q_sub[None, :, 0]
    for s in range(1, codewords.shape[1]):
        out += codewords[:, s : s + 1] * q_sub[None, :, s]
    return out


@dataclass(frozen=True)
class DistanceTables:
    """Three-level table: ``data[m, k]`` is the micro-block of ``n_q`` scores."""

    data: np.ndarray  # (M, K, n_q), C-contiguous

    @property
    def n_q(self) -> int:
        return self.data.shape[2]

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def offset(self, m: int, k: int, i: int = 0) -> int:
        M, K, n_q = self.data.shape
        return (m * K + k) * n_q + i


@dataclass(frozen=True)
class NaiveDistanceTables:
    """One independent (M, K) table per query token."""

    data: np.ndarray  # (n_q, M, K)


def build_distance_tables(query: np.ndarray, codec: PQCodec) -> DistanceTables:
    subs = _split(np.asarray(query, dtype=np.float32), codec.M)
    data = np.empty((codec.M, codec.K, subs.shape[0]), dtype=np.float32)
    for m in range(codec.M):
        data[m] = _subspace_dots(subs[:, m, :], codec.codebooks[m])
    return DistanceTables(data)


def build_naive_tables(query: np.ndarray, codec: PQCodec) -> NaiveDistanceTables:
    subs = _split(np.asarray(query, dtype=np.float32), codec.M)
    data = np.empty((subs.shape[0], codec.M, codec.K), dtype=np.float32)
    for m in range(codec.M):
        data[:, m, :] = _subspace_dots(subs[:, m, :], codec.codebooks[m]).T
    return NaiveDistanceTables(data)


def _check_codes(codes: np.ndarray, K: int, doc_id) -> None:
    if codes.size and int(codes.max()) >= K:
        raise CorruptRecordError(doc_id, f"code {int(codes.max())} out of range for {K} codewords")


def residual_scores(codes: np.ndarray, norms: np.ndarray, tables: DistanceTables, doc_id=None) -> np.ndarray:
    """(n_tokens, n_q) residual contributions ``rho_j * sum_m table[m, code_jm, :]``."""
    _check_codes(codes, tables.data.shape[1], doc_id)
    data = tables.data
    acc = data[0][codes[:, 0]]
    for m in range(1, data.shape[0]):
        acc += data[m][codes[:, m]]
    acc *= norms[:, None]
    return acc


def residual_scores_naive(codes: np.ndarray, norms: np.ndarray, tables: NaiveDistanceTables, doc_id=None) -> np.ndarray:
    """(n_q, n_tokens) residual contributions read from per-query-token tables."""
    _check_codes(codes, tables.data.shape[2], doc_id)
    data = tables.data
    acc = data[:, 0, codes[:, 0]]
    for m in range(1, data.shape[1]):
        acc += data[:, m, codes[:, m]]
    acc *= norms[None, :]
    return acc


def score_tokens(record: DocRecord, tables: DistanceTables, centroid_scores: np.ndarray, doc_id=None) -> np.ndarray:
    """(n_q, n_d) approximate token scores: centroid score plus scaled residual term."""
    return centroid_scores + residual_scores(record.codes, record.norms, tables, doc_id).T


def score_tokens_naive(record: DocRecord, tables: NaiveDistanceTables, centroid_scores: np.ndarray, doc_id=None) -> np.ndarray:
    return centroid_scores + residual_scores_naive(record.codes, record.norms, tables, doc_id)
