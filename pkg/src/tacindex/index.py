"""Index directory: codebook, PQ codec, compressed corpus, centroid graph, inverted lists.

``manifest.txt`` records build parameters and the SHA-256 of every component;
loading recomputes the hashes and refuses mismatched or tampered parts.
"""

from __future__ import annotations

import logging
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import sha256_file
from .centroid_index import CentroidGraph, InvertedLists, build_graph, build_inverted_lists
from .corpus import TokenVectorCorpus
from .errors import IndexIntegrityError
from .pq import CompressedCorpus, PQCodec, compress, normalized_residuals, train_pq
from .tac import Assignment, TokenPartitionedCodebook

logger = logging.getLogger(__name__)

COMPONENTS = {
    "codebook": "codebook.bin",
    "codec": "codec.bin",
    "compressed": "compressed.bin",
    "graph": "graph.bin",
    "lists": "lists.bin",
}
MANIFEST = "manifest.txt"


@dataclass(eq=False)
class Index:
    codebook: TokenPartitionedCodebook
    codec: PQCodec
    compressed: CompressedCorpus
    graph: CentroidGraph
    lists: InvertedLists
    doc_ids: list[str] | None = None
    params: dict = field(default_factory=dict)

    @property
    def n_docs(self) -> int:
        return self.compressed.n_docs

    def external_id(self, d: int) -> str:
        return self.doc_ids[d] if self.doc_ids is not None else str(d)

    def save(self, path) -> Path:
        """Write into a scratch directory first so a failed save leaves nothing behind."""
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out.parent))
        try:
            self.codebook.save(tmp / COMPONENTS["codebook"])
            self.codec.save(tmp / COMPONENTS["codec"])
            self.compressed.save(tmp / COMPONENTS["compressed"])
            self.graph.save(tmp / COMPONENTS["graph"])
            self.lists.save(tmp / COMPONENTS["lists"])
            if self.doc_ids is not None:
                (tmp / "doc_ids.txt").write_text("".join(f"{d}\n" for d in self.doc_ids), encoding="utf-8")
            lines = [f"{k}={v}" for k, v in sorted(self.params.items())]
            for name, fname in COMPONENTS.items():
                lines.append(f"sha256.{name}={sha256_file(tmp / fname)}")
            (tmp / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
            if out.exists():
                shutil.rmtree(out)
            tmp.rename(out)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return out

    @classmethod
    def load(cls, path, verify: bool = True) -> "Index":
        root = Path(path)
        manifest = read_manifest(root)
        for name, fname in COMPONENTS.items():
            fpath = root / fname
            if not fpath.exists():
                raise IndexIntegrityError(f"index component missing: {fpath}")
            if verify and sha256_file(fpath) != manifest.get(f"sha256.{name}"):
                raise IndexIntegrityError(f"{fname} does not match the hash recorded in {MANIFEST}")
        codebook = TokenPartitionedCodebook.load(root / COMPONENTS["codebook"])
        codec = PQCodec.load(root / COMPONENTS["codec"])
        compressed = CompressedCorpus.load(root / COMPONENTS["compressed"])
        graph = CentroidGraph.load(root / COMPONENTS["graph"], codebook.centroids)
        lists = InvertedLists.load(root / COMPONENTS["lists"])
        if lists.n_lists != codebook.size:
            raise IndexIntegrityError(f"{lists.n_lists} inverted lists for {codebook.size} centroids")
        ids_path = root / "doc_ids.txt"
        doc_ids = ids_path.read_text(encoding="utf-8").splitlines() if ids_path.exists() else None
        params = {k: v for k, v in manifest.items() if not k.startswith("sha256.")}
        return cls(codebook, codec, compressed, graph, lists, doc_ids, params)

    def size_report(self) -> dict[str, int]:
        n = self.compressed.centroid_ids.size
        return {
            "tokens": n,
            "bytes_centroid_ids": 4 * n,
            "bytes_codes": self.codec.M * n,
            "bytes_norms": 4 * n,
            "bytes_per_token": 8 + self.codec.M,
            "graph_edges": int(sum(a.size for layer in self.graph.layers for a in layer.values())),
            "postings": self.lists.n_postings,
        }


def read_manifest(root: Path) -> dict[str, str]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise IndexIntegrityError(f"missing {path}")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def build_index(
    corpus: TokenVectorCorpus,
    codebook: TokenPartitionedCodebook,
    assignment: Assignment,
    *,
    pq_m: int = 32,
    pq_bits: int = 8,
    pq_iterations: int = 10,
    pq_sample: int = 1 << 16,
    graph_m: int = 32,
    ef_construction: int = 200,
    seed: int = 0,
) -> Index:
    """Train the residual codec, compress the corpus, build graph and lists."""
    rng = np.random.default_rng(seed)
    n = corpus.n_vectors
    nonzero = np.flatnonzero(assignment.residual_norms > 0)
    take = nonzero if nonzero.size <= pq_sample else np.sort(rng.choice(nonzero, pq_sample, replace=False))
    sample = normalized_residuals(
        corpus.vectors[take], codebook.centroids, assignment.centroid_ids[take], assignment.residual_norms[take]
    )
    codec = train_pq(sample, pq_m, pq_bits, pq_iterations, seed)
    compressed = compress(corpus.vectors, corpus.doc_offsets, codebook.centroids, assignment, codec)
    graph = build_graph(codebook.centroids, graph_m, ef_construction, seed)
    lists = build_inverted_lists(assignment.centroid_ids, corpus.doc_of_row, codebook.size, corpus.n_docs)
    params = {
        "n_docs": corpus.n_docs,
        "n_vectors": n,
        "n_centroids": codebook.size,
        "pq_m": pq_m,
        "pq_bits": pq_bits,
        "graph_m": graph_m,
        "ef_construction": ef_construction,
        "seed": seed,
    }
    logger.info("index built: %d centroids, %d postings", codebook.size, lists.n_postings)
    return Index(codebook, codec, compressed, graph, lists, corpus.doc_ids, params)
