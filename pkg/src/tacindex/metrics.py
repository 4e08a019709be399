"""Ranking metrics over run files and relevance judgments."""

from __future__ import annotations

import logging
import re
from typing import Mapping, Sequence

from .errors import IdMismatchError, UnknownMetricError

logger = logging.getLogger(__name__)

Run = Mapping[str, Sequence[str]]
Judgments = Mapping[str, Mapping[str, int]]


def _check_ids(run: Run, qrels: Judgments) -> list[str]:
    """Queries to score: every judged query. Run queries without judgments are an error."""
    extra = sorted(set(run) - set(qrels))
    if extra:
        raise IdMismatchError(f"{len(extra)} run queries have no judgments, e.g. {extra[:3]}")
    missing = [q for q in qrels if q not in run]
    if missing:
        logger.warning("%d judged queries absent from the run count as zero", len(missing))
    if not qrels:
        raise IdMismatchError("no judged queries")
    return list(qrels)


def _first_relevant(ranked: Sequence[str], relevant: Mapping[str, int], k: int) -> int | None:
    for rank, did in enumerate(ranked[:k], 1):
        if relevant.get(did, 0) >= 1:
            return rank
    return None


def mrr_at_k(run: Run, qrels: Judgments, k: int = 10) -> float:
    qids = _check_ids(run, qrels)
    total = 0.0
    for q in qids:
        r = _first_relevant(run.get(q, ()), qrels[q], k)
        if r is not None:
            total += 1.0 / r
    return total / len(qids)


def success_at_k(run: Run, qrels: Judgments, k: int = 5) -> float:
    qids = _check_ids(run, qrels)
    hits = sum(_first_relevant(run.get(q, ()), qrels[q], k) is not None for q in qids)
    return hits / len(qids)


def recall_vs_oracle(run: Run, oracle: Run, k: int = 10) -> float:
    """Mean overlap between each query's top ``k`` and the oracle's top ``k``."""
    if set(run) - set(oracle):
        raise IdMismatchError("run has queries the oracle run lacks")
    if not oracle:
        raise IdMismatchError("empty oracle run")
    vals = []
    for q, truth in oracle.items():
        truth = set(truth[:k])
        if truth:
            vals.append(len(truth & set(run.get(q, ())[:k])) / len(truth))
    return sum(vals) / len(vals)


_METRIC = re.compile(r"^(mrr|success|recall)@(\d+)$")


def parse_metric(metric: str) -> tuple[str, int]:
    m = _METRIC.match(metric.strip().lower())
    if not m or int(m.group(2)) < 1:
        raise UnknownMetricError(f"unknown metric {metric!r}; expected mrr@k, success@k or recall@k")
    return m.group(1), int(m.group(2))


def evaluate(run: Run, qrels: Judgments | None, metric: str, oracle: Run | None = None) -> float:
    """Compute ``mrr@k``, ``success@k`` (against qrels) or ``recall@k`` (against an oracle run)."""
    name, k = parse_metric(metric)
    if name == "recall":
        if oracle is None:
            raise UnknownMetricError("recall@k needs an oracle run")
        return recall_vs_oracle(run, oracle, k)
    if qrels is None:
        raise UnknownMetricError(f"{name}@k needs qrels")
    return (mrr_at_k if name == "mrr" else success_at_k)(run, qrels, k)
