import numpy as np
import pytest

from poisonbench.corpus import NewsArticle
from poisonbench.embeddings import (
    DimensionMismatch,
    EmbeddingTable,
    cosine_distance,
    load_embeddings,
    news_distance,
    news_embedding,
    word_distance,
    word_vector,
)


def make_table(**vectors):
    dim = len(next(iter(vectors.values())))
    return EmbeddingTable(dim=dim, vectors={k: np.array(v, dtype=float) for k, v in vectors.items()})


class TestLoadEmbeddings:
    def test_reads_token_and_vector(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("cat 1.0 0.0\ndog 0.0 1.0\n")
        table = load_embeddings(path, dim=2)
        assert np.allclose(word_vector(table, "cat"), [1.0, 0.0])

    def test_duplicate_token_keeps_first(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("cat 1.0 0.0\ncat 0.5 0.5\n")
        table = load_embeddings(path, dim=2)
        assert np.allclose(word_vector(table, "cat"), [1.0, 0.0])

    def test_wrong_dimension_raises(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("cat 1.0 0.0 3.0\n")
        with pytest.raises(DimensionMismatch):
            load_embeddings(path, dim=2)


class TestWordVector:
    def test_oov_is_deterministic(self):
        table = EmbeddingTable(dim=8)
        v1 = word_vector(table, "nonesuch")
        v2 = word_vector(EmbeddingTable(dim=8), "nonesuch")
        assert np.array_equal(v1, v2)
        assert np.linalg.norm(v1) == pytest.approx(1.0)

    def test_distinct_oov_tokens_are_separated(self):
        # 100 hashed tokens: every pair at strictly positive distance
        table = EmbeddingTable(dim=16)
        tokens = [f"tok{i}" for i in range(100)]
        vecs = np.stack([word_vector(table, t) for t in tokens])
        gram = vecs @ vecs.T
        np.fill_diagonal(gram, -1.0)
        assert gram.max() < 1.0 - 1e-9  # cos < 1 => distance > 0


class TestDistances:
    def test_identical_tokens_at_zero(self):
        table = make_table(a=[1.0, 2.0])
        assert word_distance(table, "a", "a") == 0.0

    def test_orthogonal_at_half(self):
        table = make_table(a=[1.0, 0.0], b=[0.0, 1.0])
        assert word_distance(table, "a", "b") == pytest.approx(0.5)

    def test_antipodal_at_one(self):
        table = make_table(a=[1.0, 0.0], b=[-1.0, 0.0])
        assert word_distance(table, "a", "b") == pytest.approx(1.0)

    def test_zero_vector_convention(self):
        table = make_table(z=[0.0, 0.0], a=[1.0, 0.0])
        assert word_distance(table, "z", "a") == 0.5
        assert word_distance(table, "z", "z") == 0.5
        assert cosine_distance(np.zeros(2), np.zeros(2)) == 0.5

    def test_symmetry_and_scale_invariance(self):
        rng = np.random.default_rng(11)
        table = EmbeddingTable(dim=6)
        for _ in range(20):
            a, b = f"w{rng.integers(50)}", f"w{rng.integers(50)}"
            assert word_distance(table, a, b) == pytest.approx(word_distance(table, b, a))
        scaled = make_table(a=[2.0, 0.0], b=[0.0, 7.0])
        unit = make_table(a=[1.0, 0.0], b=[0.0, 1.0])
        assert word_distance(scaled, "a", "b") == pytest.approx(word_distance(unit, "a", "b"))


class TestNewsEmbedding:
    def test_single_token_title(self):
        table = make_table(a=[1.0, 0.0])
        art = NewsArticle(id="n", title=("a",))
        assert np.allclose(news_embedding(table, art), [1.0, 0.0])

    def test_repeated_token_mean_idempotent(self):
        table = make_table(a=[1.0, 3.0])
        one = news_embedding(table, NewsArticle(id="n", title=("a",)))
        two = news_embedding(table, NewsArticle(id="n", title=("a", "a")))
        assert np.allclose(one, two)

    def test_two_token_mean(self):
        table = make_table(a=[1.0, 0.0], b=[0.0, 1.0])
        emb = news_embedding(table, NewsArticle(id="n", title=("a", "b")))
        assert np.allclose(emb, [0.5, 0.5])

    def test_permutation_invariance(self):
        table = EmbeddingTable(dim=5)
        fwd = news_embedding(table, NewsArticle(id="n", title=("x", "y", "z")))
        rev = news_embedding(table, NewsArticle(id="n", title=("z", "x", "y")))
        assert np.allclose(fwd, rev)


class TestNewsDistance:
    def test_identical_titles(self):
        table = EmbeddingTable(dim=4)
        a = NewsArticle(id="a", title=("w1", "w2"))
        b = NewsArticle(id="b", title=("w1", "w2"))
        assert news_distance(table, a, b) == pytest.approx(0.0)

    def test_matches_hand_computed_cosine(self):
        table = make_table(a=[1.0, 0.0], b=[0.0, 1.0])
        art1 = NewsArticle(id="1", title=("a",))
        art2 = NewsArticle(id="2", title=("a", "b"))
        # means: (1,0) and (.5,.5); cos = .5 / (1 * sqrt(.5)) = 1/sqrt(2)
        expected = (1.0 - 1.0 / np.sqrt(2.0)) / 2.0
        assert news_distance(table, art1, art2) == pytest.approx(expected, rel=1e-12)

    def test_range(self):
        table = EmbeddingTable(dim=3)
        rng = np.random.default_rng(2)
        for _ in range(25):
            t1 = tuple(f"w{rng.integers(30)}" for _ in range(3))
            t2 = tuple(f"w{rng.integers(30)}" for _ in range(3))
            d = news_distance(table, NewsArticle(id="a", title=t1), NewsArticle(id="b", title=t2))
            assert 0.0 <= d <= 1.0
