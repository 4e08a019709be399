"""Seeded synthetic multivector collections.

Token types follow a Zipf law. Each type owns a few "senses" (unit
directions); an occurrence is its sense plus a per-document topic direction
plus isotropic noise, renormalized onto the unit sphere. Queries are noisy
copies of tokens taken from one planted relevant document.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .corpus import QuerySet, TokenVectorCorpus


@dataclass
class SynthConfig:
    n_docs: int = 2000
    vocab_size: int = 5000
    dim: int = 32
    zipf_s: float = 1.0
    doc_len_min: int = 16
    doc_len_max: int = 48
    max_senses: int = 4
    noise_min: float = 0.05
    noise_max: float = 0.5
    topic_weight: float = 0.3
    n_queries: int = 100
    query_len_min: int = 8
    query_len_max: int = 32
    query_noise: float = 0.1
    seed: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _unit(x: np.ndarray) -> np.ndarray:
    return (x / np.linalg.norm(x, axis=-1, keepdims=True)).astype(np.float32)


def zipf_probabilities(vocab_size: int, s: float) -> np.ndarray:
    p = np.arange(1, vocab_size + 1, dtype=np.float64) ** -s
    return p / p.sum()


def generate(cfg: SynthConfig):
    """Return (corpus, queries, qrels) where qrels maps query id -> {doc id: 1}."""
    rng = np.random.default_rng(cfg.seed)
    dim = cfg.dim

    n_senses = rng.integers(1, cfg.max_senses + 1, size=cfg.vocab_size)
    sense_start = np.concatenate([[0], np.cumsum(n_senses)[:-1]])
    senses = _unit(rng.standard_normal((int(n_senses.sum()), dim)))
    noise = rng.uniform(cfg.noise_min, cfg.noise_max, size=cfg.vocab_size)
    topics = _unit(rng.standard_normal((cfg.n_docs, dim)))

    lengths = rng.integers(cfg.doc_len_min, cfg.doc_len_max + 1, size=cfg.n_docs)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.uint64)
    n = int(offsets[-1])
    tokens = rng.choice(cfg.vocab_size, size=n, p=zipf_probabilities(cfg.vocab_size, cfg.zipf_s))
    doc_of_row = np.repeat(np.arange(cfg.n_docs), lengths)
    sense = sense_start[tokens] + (rng.random(n) * n_senses[tokens]).astype(np.int64)

    vectors = np.empty((n, dim), dtype=np.float32)
    step = 1 << 18
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        v = senses[sense[lo:hi]] + cfg.topic_weight * topics[doc_of_row[lo:hi]]
        v += (noise[tokens[lo:hi], None] / np.sqrt(dim)) * rng.standard_normal((hi - lo, dim)).astype(np.float32)
        vectors[lo:hi] = _unit(v)

    corpus = TokenVectorCorpus(vectors, tokens.astype(np.uint32), offsets, cfg.vocab_size)

    queries, ids, qrels = [], [], {}
    for qi in range(cfg.n_queries):
        d = int(rng.integers(cfg.n_docs))
        doc = corpus.document(d)
        n_q = int(rng.integers(cfg.query_len_min, cfg.query_len_max + 1))
        rows = rng.choice(doc.shape[0], size=n_q, replace=n_q > doc.shape[0])
        q = doc[rows] + (cfg.query_noise / np.sqrt(dim)) * rng.standard_normal((n_q, dim)).astype(np.float32)
        qid = f"q{qi}"
        queries.append(_unit(q))
        ids.append(qid)
        qrels[qid] = {corpus.external_id(d): 1}
    return corpus, QuerySet(queries, ids, max_tokens=max(32, cfg.query_len_max)), qrels
