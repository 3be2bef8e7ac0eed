import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonbench.corpus import NewsArticle, synth_corpus
from poisonbench.embeddings import EmbeddingTable
from poisonbench.hiertree import (
    NoValidPairs,
    build_content_tree,
    build_news_tree,
    content_pairs,
    evaluations_per_action,
    heap_depth,
    leaf_probabilities,
    sample_path,
    visual_leaf_order,
)
from poisonbench.risk import news_effectiveness


def small_corpus(n_news=5, seed=1):
    return synth_corpus(seed=seed, n_users=12, n_news=n_news, n_candidates=3, title_len=4, vocab_size=60)


class TestLayout:
    def test_single_leaf(self):
        assert visual_leaf_order(1) == [1]
        assert heap_depth(1) == 0

    def test_five_leaves_matches_heap_enumeration(self):
        # 9 nodes total; leaves at 5..9; bottom layer (8, 9) reads first
        assert visual_leaf_order(5) == [8, 9, 5, 6, 7]

    def test_power_of_two_is_perfect(self):
        assert visual_leaf_order(4) == [4, 5, 6, 7]
        assert heap_depth(4) == 2

    @given(st.integers(min_value=1, max_value=1000))
    @settings(max_examples=120, deadline=None)
    def test_leaf_count_always_n(self, n):
        order = visual_leaf_order(n)
        assert len(order) == n
        assert sorted(order) == list(range(n, 2 * n))


class TestBuildNewsTree:
    def test_single_news(self):
        corpus = small_corpus(n_news=1)
        table = EmbeddingTable(dim=8)
        tree = build_news_tree(corpus, table, corpus.target, seed=0)
        assert tree.n_leaves == 1
        assert tree.n_nodes == 1

    def test_leaves_sorted_by_effectiveness(self):
        corpus = small_corpus(n_news=17)
        table = EmbeddingTable(dim=8)
        tree = build_news_tree(corpus, table, corpus.target, seed=0)
        effs = [tree.leaf_effectiveness[i] for i in tree.leaves_in_visual_order()]
        assert all(a >= b for a, b in zip(effs, effs[1:]))
        recomputed = sorted(
            (news_effectiveness(corpus, table, n, corpus.target) for n in corpus.viewed_ids),
            reverse=True,
        )
        assert effs == pytest.approx(recomputed)

    def test_random_order_keeps_leaf_set(self):
        corpus = small_corpus(n_news=9)
        table = EmbeddingTable(dim=8)
        sorted_tree = build_news_tree(corpus, table, corpus.target, seed=0)
        random_tree = build_news_tree(corpus, table, corpus.target, seed=0, random_order=True)
        assert set(sorted_tree.leaf_payload.values()) == set(random_tree.leaf_payload.values())

    def test_internal_embeddings_seeded(self):
        corpus = small_corpus(n_news=9)
        table = EmbeddingTable(dim=8)
        t1 = build_news_tree(corpus, table, corpus.target, seed=3)
        t2 = build_news_tree(corpus, table, corpus.target, seed=3)
        assert np.array_equal(t1.embeddings, t2.embeddings)
        assert np.abs(t1.embeddings[1 : t1.n_leaves]).max() <= 0.5


class TestBuildContentTree:
    def table(self):
        return EmbeddingTable(dim=6)

    def test_one_pair(self):
        tree = build_content_tree(
            NewsArticle(id="n", title=("x",)), NewsArticle(id="t", title=("y",)), self.table(), seed=0
        )
        assert tree.n_leaves == 1
        assert tree.leaf_payload[1] == ("x", "y")

    def test_product_count_no_overlap(self):
        art = NewsArticle(id="n", title=("a", "b", "c"))
        tgt = NewsArticle(id="t", title=("d", "e", "f", "g"))
        tree = build_content_tree(art, tgt, self.table(), seed=0)
        assert tree.n_leaves == 12

    def test_overlap_excludes_identity(self):
        art = NewsArticle(id="n", title=("a", "b"))
        tgt = NewsArticle(id="t", title=("a", "c"))
        assert len(content_pairs(art, tgt)) == 3
        tree = build_content_tree(art, tgt, self.table(), seed=0)
        assert tree.n_leaves == 3

    def test_all_identical_raises(self):
        art = NewsArticle(id="n", title=("a",))
        tgt = NewsArticle(id="t", title=("a",))
        with pytest.raises(NoValidPairs):
            build_content_tree(art, tgt, self.table(), seed=0)

    def test_duplicate_tokens_deduplicated(self):
        art = NewsArticle(id="n", title=("a", "a", "b"))
        tgt = NewsArticle(id="t", title=("c", "c"))
        assert content_pairs(art, tgt) == [("a", "c"), ("b", "c")]


class TestSamplePath:
    def build(self, n=8, seed=0):
        corpus = small_corpus(n_news=n, seed=2)
        table = EmbeddingTable(dim=8)
        return build_news_tree(corpus, table, corpus.target, seed=seed), table

    def test_greedy_zero_scores_goes_left(self):
        tree, _ = self.build(n=4)
        payload, visited, scores = sample_path(tree, np.zeros(8), "greedy")
        # ties go left: path 1 -> 2 -> 4, the leftmost visual leaf
        assert visited == [2, 4]
        assert payload == tree.leaf_payload[4]

    def test_depth_two_tree_two_decisions(self):
        tree, _ = self.build(n=4)
        _, visited, scores = sample_path(tree, np.ones(8), "greedy")
        assert len(visited) == 2 == len(scores)

    def test_path_length_bound(self):
        for n in range(1, 40):
            corpus = small_corpus(n_news=n, seed=3)
            table = EmbeddingTable(dim=8)
            tree = build_news_tree(corpus, table, corpus.target, seed=1)
            _, visited, _ = sample_path(tree, np.ones(8), "greedy")
            assert len(visited) <= math.ceil(math.log2(max(n, 2))) + 1

    def test_boltzmann_low_temperature_approaches_greedy(self):
        tree, _ = self.build(n=8)
        rng = np.random.default_rng(0)
        v = rng.standard_normal(8)
        greedy_leaf, _, _ = sample_path(tree, v, "greedy")
        draws = {}
        sample_rng = np.random.default_rng(1)
        for _ in range(10_000):
            leaf, _, _ = sample_path(tree, v, "boltzmann", sample_rng, temperature=1e-3)
            draws[leaf] = draws.get(leaf, 0) + 1
        assert draws.get(greedy_leaf, 0) / 10_000 > 0.99

    def test_boltzmann_every_leaf_reachable(self):
        for n in range(1, 17):
            corpus = small_corpus(n_news=n, seed=4)
            table = EmbeddingTable(dim=8)
            tree = build_news_tree(corpus, table, corpus.target, seed=1)
            probs = leaf_probabilities(tree, np.ones(8) * 0.3, temperature=1.0)
            assert len(probs) == n
            assert all(p > 0 for p in probs.values())
            assert sum(probs.values()) == pytest.approx(1.0)

    def test_boltzmann_frequencies_match_enumeration(self):
        tree, _ = self.build(n=8)
        rng = np.random.default_rng(5)
        v = rng.standard_normal(8) * 2
        expected = leaf_probabilities(tree, v, temperature=1.0)
        counts = dict.fromkeys(expected, 0)
        sample_rng = np.random.default_rng(6)
        n_draws = 20_000
        for _ in range(n_draws):
            leaf_payload, visited, _ = sample_path(tree, v, "boltzmann", sample_rng, temperature=1.0)
            counts[visited[-1]] += 1
        for leaf, p in expected.items():
            assert counts[leaf] / n_draws == pytest.approx(p, abs=0.02)


class TestEvaluationsPerAction:
    def test_examples(self):
        assert evaluations_per_action(4, 4) == 4
        assert evaluations_per_action(5, 12) == 3 + 4
        assert evaluations_per_action(1, 1) == 0

    def test_logarithmic_bound(self):
        for n, m in [(2, 2), (7, 30), (500, 56), (1000, 1000)]:
            bound = math.ceil(math.log2(n)) + math.ceil(math.log2(m)) + 2
            assert evaluations_per_action(n, m) <= bound
