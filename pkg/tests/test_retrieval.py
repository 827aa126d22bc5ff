import numpy as np
import pytest

from ragcanary.errors import ValidationError
from ragcanary.retrieval import (
    HashingEmbedder,
    VectorIndex,
    build_index,
    retrieve,
    target_retrieval_accuracy,
)


def brute_force_rank(index: VectorIndex, query_vec: np.ndarray) -> list[str]:
    """Oracle: python-loop cosine, the documented 12-decimal rounding, then a
    stable sort by (-score, doc_id)."""
    scored = []
    for doc_id, row in zip(index.doc_ids, index.matrix):
        score = round(sum(float(a) * float(b) for a, b in zip(row, query_vec)), 12)
        scored.append((score, doc_id))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [doc_id for _, doc_id in scored]


class TestHashingEmbedder:
    def test_deterministic(self):
        emb = HashingEmbedder(256, seed=3)
        text = "alpha beta gamma delta"
        assert np.array_equal(emb(text), emb(text))

    def test_unit_norm(self):
        emb = HashingEmbedder(64, seed=1)
        assert np.linalg.norm(emb("some words here")) == pytest.approx(1.0, abs=1e-6)

    def test_near_orthogonal_disjoint_texts(self):
        # Monte Carlo oracle over disjoint-vocabulary random texts.
        emb = HashingEmbedder(256, seed=9)
        rng = np.random.default_rng(4)
        cosines = []
        for i in range(100):
            a_words = [f"a{i}_{j}" for j in rng.integers(0, 1000, size=20)]
            b_words = [f"b{i}_{j}" for j in rng.integers(0, 1000, size=20)]
            cosines.append(abs(float(emb(" ".join(a_words)) @ emb(" ".join(b_words)))))
        assert float(np.mean(cosines)) < 0.15

    def test_dimension_floor(self):
        with pytest.raises(ValidationError):
            HashingEmbedder(4, seed=0)

    def test_empty_text_rejected(self):
        with pytest.raises(ValidationError):
            HashingEmbedder(64, seed=0)("")


class TestIndex:
    def test_build_counts(self):
        emb = HashingEmbedder(64, seed=2)
        index = build_index([("d1", "one two"), ("d2", "three four"), ("d3", "five")], emb)
        assert len(index) == 3

    def test_duplicate_id_rejected(self):
        emb = HashingEmbedder(64, seed=2)
        with pytest.raises(ValidationError, match="dup"):
            build_index([("d1", "a b"), ("d1", "c d")], emb)

    def test_rebuild_identical(self):
        emb = HashingEmbedder(64, seed=2)
        corpus = [(f"d{i}", f"word{i} word{i + 1}") for i in range(10)]
        a = build_index(corpus, emb)
        b = build_index(corpus, emb)
        assert np.array_equal(a.matrix, b.matrix)

    def test_non_unit_vector_rejected(self):
        with pytest.raises(ValidationError, match="unit norm"):
            VectorIndex(["d1"], np.array([[1.0, 1.0]]))

    def test_embedding_failures_reported_per_doc(self):
        emb = HashingEmbedder(64, seed=2)
        index = build_index([("good", "fine text"), ("bad", "")], emb)
        assert len(index) == 1
        assert index.failures[0][0] == "bad"

    def test_all_failures_rejected(self):
        emb = HashingEmbedder(64, seed=2)
        with pytest.raises(ValidationError):
            build_index([("bad", ""), ("worse", "")], emb)

    def test_save_load_round_trip(self, tmp_path):
        emb = HashingEmbedder(32, seed=5)
        index = build_index([(f"d{i}", f"tok{i} tok{i + 3}") for i in range(6)], emb)
        path = tmp_path / "index.txt"
        index.save(path)
        again = VectorIndex.load(path)
        assert again.doc_ids == index.doc_ids
        assert np.array_equal(again.matrix, index.matrix)


class TestRetrieve:
    def test_exact_self_match(self):
        emb = HashingEmbedder(128, seed=7)
        corpus = [(f"d{i}", f"unique{i} word{i}") for i in range(5)]
        index = build_index(corpus, emb)
        result = retrieve(index, "unique2 word2", 1, emb)
        assert result.hits[0][0] == "d2"
        assert result.hits[0][1] == pytest.approx(1.0, abs=1e-9)

    def test_truncation_to_corpus_size(self):
        emb = HashingEmbedder(64, seed=7)
        index = build_index([("d1", "aa bb"), ("d2", "cc dd")], emb)
        assert len(retrieve(index, "aa", 3, emb).hits) == 2

    def test_k_validation_and_empty_query_path(self):
        emb = HashingEmbedder(64, seed=7)
        index = build_index([("d1", "aa")], emb)
        with pytest.raises(ValidationError):
            retrieve(index, "aa", 0, emb)

    def test_matches_brute_force_oracle(self):
        emb = HashingEmbedder(96, seed=13)
        rng = np.random.default_rng(6)
        words = [f"w{i}" for i in range(300)]
        corpus = [
            (f"doc{i:03d}", " ".join(rng.choice(words, size=12).tolist()))
            for i in range(100)
        ]
        index = build_index(corpus, emb)
        for q in range(20):
            query = " ".join(rng.choice(words, size=5).tolist())
            expected = brute_force_rank(index, emb(query))
            got = retrieve(index, query, 100, emb).doc_ids()
            assert got == expected

    def test_tie_break_by_doc_id(self):
        # Two docs with identical text embed identically: tie broken by id.
        emb = HashingEmbedder(64, seed=7)
        index = build_index([("zz", "same text"), ("aa", "same text")], emb)
        result = retrieve(index, "same text", 2, emb)
        assert result.doc_ids() == ["aa", "zz"]

    def test_score_stability_under_unrelated_addition(self):
        emb = HashingEmbedder(128, seed=17)
        corpus = [(f"d{i}", f"alpha{i} beta{i} gamma{i}") for i in range(20)]
        index = build_index(corpus, emb)
        query = "alpha3 beta3"
        before = retrieve(index, query, 5, emb)
        bigger = build_index(corpus + [("zzz", "totally unrelated terms qqq")], emb)
        after = retrieve(bigger, query, 6, emb)
        filtered = [d for d in after.doc_ids() if d != "zzz"][:5]
        assert filtered == before.doc_ids()


class TestTargetRetrievalAccuracy:
    def _world(self):
        emb = HashingEmbedder(128, seed=19)
        corpus = [(f"d{i}", f"unique{i} extra{i}") for i in range(8)]
        return build_index(corpus, emb), emb

    def test_all_hits(self):
        index, emb = self._world()
        pairs = [(f"unique{i}", f"d{i}") for i in range(8)]
        assert target_retrieval_accuracy(pairs, index, 3, emb) == 1.0

    def test_three_of_four(self):
        index, emb = self._world()
        pairs = [("unique0", "d0"), ("unique1", "d1"), ("unique2", "d2"),
                 ("unique3", "d7")]
        assert target_retrieval_accuracy(pairs, index, 1, emb) == 0.75

    def test_unknown_id_counts_as_miss(self):
        index, emb = self._world()
        pairs = [("unique0", "d0"), ("unique1", "nope")]
        assert target_retrieval_accuracy(pairs, index, 3, emb) == 0.5

    def test_empty_pairs_rejected(self):
        index, emb = self._world()
        with pytest.raises(ValidationError):
            target_retrieval_accuracy([], index, 3, emb)
