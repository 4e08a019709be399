import numpy as np
import pytest

from tacindex import tac
from tacindex.corpus import TokenVectorCorpus
from tacindex.index import build_index
from tacindex.synth import SynthConfig, generate

VERDICTS = pytest.StashKey[list]()


def unit(x):
    x = np.asarray(x, dtype=np.float64)
    return (x / np.linalg.norm(x, axis=-1, keepdims=True)).astype(np.float32)


def random_corpus(rng, n_docs=20, vocab=6, dim=8, max_len=12):
    lengths = rng.integers(1, max_len + 1, size=n_docs)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    n = int(offsets[-1])
    return TokenVectorCorpus(unit(rng.standard_normal((n, dim))), rng.integers(0, vocab, n), offsets, vocab)


@pytest.fixture(scope="session")
def small_world():
    """A 600-document synthetic collection with a built index (PQ M=8)."""
    corpus, queries, qrels = generate(SynthConfig(n_docs=600, vocab_size=300, n_queries=12, seed=11))
    stats = tac.compute_token_stats(corpus)
    plan = tac.allocate(stats, 700)
    codebook = tac.train(corpus, plan, iterations=5, seed=1)
    assignment = tac.assign(corpus, codebook)
    index = build_index(corpus, codebook, assignment, pq_m=8, pq_iterations=5, graph_m=8, ef_construction=40, seed=1)
    return corpus, queries, qrels, index


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; echoed in the terminal summary."""
    lines = request.config.stash.setdefault(VERDICTS, [])
    seen = []

    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion:>2}: {detail}"
        lines.append(line)
        seen.append(criterion)
        print(line)
        return ok

    yield record
    if not seen:
        lines.append(f"FAIL  {request.node.name}: raised before reaching a verdict")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
