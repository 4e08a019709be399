import numpy as np
import pytest

from tacindex.corpus import (
    HEADER,
    QuerySet,
    TokenVectorCorpus,
    load_corpus,
    load_qrels,
    load_queries,
    read_run,
    save_corpus,
    save_queries,
    token_histogram,
    top_k_share,
    write_qrels,
    write_run,
)
from tacindex.errors import (
    CorpusFormatError,
    MalformedHeaderError,
    NonMonotoneOffsetsError,
    NormalizationError,
    SizeMismatchError,
    TokenRangeError,
)

from conftest import random_corpus, unit


def toy():
    rng = np.random.default_rng(0)
    return TokenVectorCorpus(unit(rng.standard_normal((5, 4))), [0, 1, 0, 2, 1], [0, 3, 5], vocab_size=3)


class TestCorpus:
    def test_minimal(self, tmp_path):
        save_corpus(toy(), tmp_path / "c")
        c = load_corpus(tmp_path / "c")
        assert (c.n_docs, c.n_vectors, c.dim) == (2, 5, 4)
        assert c.doc_of_row.tolist() == [0, 0, 0, 1, 1]

    def test_round_trip_bitwise(self, tmp_path):
        c = random_corpus(np.random.default_rng(3))
        save_corpus(c, tmp_path / "c")
        back = load_corpus(tmp_path / "c")
        assert back.vectors.tobytes() == c.vectors.tobytes()
        assert np.array_equal(back.token_ids, c.token_ids)
        assert np.array_equal(back.doc_offsets, c.doc_offsets)

    def test_short_payload(self, tmp_path):
        save_corpus(toy(), tmp_path / "c")
        emb = tmp_path / "c" / "embeddings.bin"
        emb.write_bytes(emb.read_bytes()[:-4])
        with pytest.raises(SizeMismatchError):
            load_corpus(tmp_path / "c")

    def test_bad_magic(self, tmp_path):
        save_corpus(toy(), tmp_path / "c")
        emb = tmp_path / "c" / "embeddings.bin"
        raw = bytearray(emb.read_bytes())
        raw[0:2] = b"XX"
        emb.write_bytes(bytes(raw))
        with pytest.raises(MalformedHeaderError):
            load_corpus(tmp_path / "c")

    def test_truncated_header(self, tmp_path):
        save_corpus(toy(), tmp_path / "c")
        (tmp_path / "c" / "embeddings.bin").write_bytes(b"TACE")
        with pytest.raises(MalformedHeaderError):
            load_corpus(tmp_path / "c")

    def test_header_size(self):
        assert HEADER.size == 16

    @pytest.mark.parametrize("offsets", [[0, 4, 3, 5], [1, 3, 5], [0, 3, 4], [0, 3, 3, 5]])
    def test_bad_offsets(self, offsets):
        v = unit(np.ones((5, 4)))
        with pytest.raises(NonMonotoneOffsetsError):
            TokenVectorCorpus(v, np.zeros(5), offsets, 1)

    def test_token_range(self):
        with pytest.raises(TokenRangeError):
            TokenVectorCorpus(unit(np.ones((2, 3))), [0, 3], [0, 2], vocab_size=3)

    def test_norm_check_and_renormalize(self):
        v = np.full((2, 2), 2.0, dtype=np.float32)
        with pytest.raises(NormalizationError):
            TokenVectorCorpus(v, [0, 0], [0, 2], 1)
        c = TokenVectorCorpus(v, [0, 0], [0, 2], 1, renormalize=True)
        np.testing.assert_allclose(np.linalg.norm(c.vectors, axis=1), 1.0, atol=1e-6)

    def test_read_only(self):
        c = toy()
        with pytest.raises(ValueError):
            c.vectors[0, 0] = 1.0

    def test_wrong_kind(self, tmp_path):
        save_corpus(toy(), tmp_path / "c")
        with pytest.raises(CorpusFormatError):
            load_queries(tmp_path / "c")


class TestHistogram:
    def test_example(self):
        c = TokenVectorCorpus(unit(np.ones((3, 2))), [7, 7, 3], [0, 3], vocab_size=8)
        assert token_histogram(c) == {7: 2, 3: 1}

    def test_sums_to_n(self):
        for seed in range(5):
            c = random_corpus(np.random.default_rng(seed))
            assert sum(token_histogram(c).values()) == c.n_vectors

    def test_top_k_share(self):
        assert top_k_share({1: 6, 2: 3, 3: 1}, 1) == 0.6
        assert top_k_share({1: 6, 2: 3, 3: 1}, 10) == 1.0


class TestQueries:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        qs = QuerySet([unit(rng.standard_normal((n, 4))) for n in (1, 5, 3)], ["a", "b", "c"])
        save_queries(qs, tmp_path / "q")
        back = load_queries(tmp_path / "q")
        assert back.ids == ["a", "b", "c"]
        for x, y in zip(qs.queries, back.queries):
            assert x.tobytes() == y.tobytes()

    def test_too_long(self):
        with pytest.raises(CorpusFormatError):
            QuerySet([unit(np.ones((33, 4)))], ["q"])

    def test_duplicate_ids(self):
        with pytest.raises(CorpusFormatError):
            QuerySet([unit(np.ones((1, 4)))] * 2, ["q", "q"])


class TestRunsAndQrels:
    def test_qrels_unknown_flagged(self, tmp_path):
        write_qrels(tmp_path / "qrels.tsv", {"q1": {"0": 1, "99": 2}})
        qrels = load_qrels(tmp_path / "qrels.tsv", known_doc_ids=["0", "1"])
        assert qrels.relevant("q1") == {"0", "99"}
        assert qrels.unknown_docs == {("q1", "99")}

    def test_run_round_trip(self, tmp_path):
        write_run(tmp_path / "run.tsv", [("q1", [("5", 2.0), ("3", 1.5)]), ("q2", [("1", 0.25)])])
        lines = (tmp_path / "run.tsv").read_text().splitlines()
        assert lines[0] == "q1\t5\t1\t2.000000"
        assert read_run(tmp_path / "run.tsv") == {"q1": ["5", "3"], "q2": ["1"]}
