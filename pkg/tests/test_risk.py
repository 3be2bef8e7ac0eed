import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonbench.corpus import ClickHistory, Corpus, NewsArticle, NotInViewedSet, synth_corpus
from poisonbench.embeddings import EmbeddingTable
from poisonbench.risk import (
    Perturbation,
    RiskLedger,
    RiskMode,
    charge,
    load_sequence,
    make_perturbation,
    news_effectiveness,
    perturbation_risk,
    save_sequence,
    sequence_risk,
    word_effectiveness,
)


def vec_table():
    return EmbeddingTable(
        dim=2,
        vectors={
            "a": np.array([1.0, 0.0]),
            "b": np.array([0.0, 1.0]),  # distance 0.5 from a
            "c": np.array([-1.0, 0.0]),  # distance 1.0 from a
        },
    )


def freq_corpus():
    articles = {
        "N1": NewsArticle(id="N1", title=("a", "b")),
        "N2": NewsArticle(id="N2", title=("a", "a", "b", "b")),
        "C1": NewsArticle(id="C1", title=("c",)),
    }
    histories = tuple(
        ClickHistory(user=f"U{i}", clicked=("N1",) if i > 0 else ("N1", "N2")) for i in range(4)
    )
    return Corpus(articles=articles, histories=histories, candidates=frozenset({"C1"}), target="C1")


class TestPerturbationRisk:
    def test_sum_of_frequency_and_distance(self):
        corpus, table = freq_corpus(), vec_table()
        p = Perturbation(news="N1", old_word="a", new_word="b", cost=0.0)
        # freq(N1) = 1.0, distance(a,b) = 0.5
        assert perturbation_risk(corpus, table, p) == pytest.approx(1.5)

    def test_identity_forced_costs_frequency_only(self):
        corpus, table = freq_corpus(), vec_table()
        p = Perturbation(news="N2", old_word="a", new_word="a", cost=0.0)
        assert perturbation_risk(corpus, table, p) == pytest.approx(0.25)

    def test_maximum_risk(self):
        corpus, table = freq_corpus(), vec_table()
        p = Perturbation(news="N1", old_word="a", new_word="c", cost=0.0)
        assert perturbation_risk(corpus, table, p) == pytest.approx(2.0)

    def test_modes_drop_terms(self):
        corpus, table = freq_corpus(), vec_table()
        p = Perturbation(news="N2", old_word="a", new_word="b", cost=0.0)
        assert perturbation_risk(corpus, table, p, RiskMode.NO_FREQUENCY) == pytest.approx(0.5)
        assert perturbation_risk(corpus, table, p, RiskMode.NO_SIMILARITY) == pytest.approx(0.25)

    def test_unviewed_news_rejected(self):
        corpus, table = freq_corpus(), vec_table()
        p = Perturbation(news="C1", old_word="c", new_word="a", cost=0.0)
        with pytest.raises(NotInViewedSet):
            perturbation_risk(corpus, table, p)

    def test_make_perturbation_caches_cost(self):
        corpus, table = freq_corpus(), vec_table()
        p = make_perturbation(corpus, table, "N1", "a", "b")
        assert p.cost == perturbation_risk(corpus, table, p)

    def test_make_perturbation_rejects_identity(self):
        with pytest.raises(ValueError):
            make_perturbation(freq_corpus(), vec_table(), "N1", "a", "a")


class TestSequenceRisk:
    def test_empty_sequence(self):
        assert sequence_risk(freq_corpus(), vec_table(), []) == 0.0

    def test_concatenation_additive(self):
        corpus, table = freq_corpus(), vec_table()
        s1 = [make_perturbation(corpus, table, "N1", "a", "b")]
        s2 = [make_perturbation(corpus, table, "N2", "b", "c")]
        assert sequence_risk(corpus, table, s1 + s2) == pytest.approx(
            sequence_risk(corpus, table, s1) + sequence_risk(corpus, table, s2)
        )

    def test_three_perturbations_hand_sum(self):
        corpus, table = freq_corpus(), vec_table()
        seq = [
            make_perturbation(corpus, table, "N1", "a", "c"),  # 1.0 + 1.0
            make_perturbation(corpus, table, "N2", "a", "b"),  # 0.25 + 0.5
            make_perturbation(corpus, table, "N2", "b", "c"),  # 0.25 + 0.5
        ]
        assert sequence_risk(corpus, table, seq) == pytest.approx(2.0 + 0.75 + 0.75)

    def test_matches_ledger_spend_bitwise(self):
        corpus, table = freq_corpus(), vec_table()
        seq = [
            make_perturbation(corpus, table, "N1", "a", "b"),
            make_perturbation(corpus, table, "N2", "b", "c"),
            make_perturbation(corpus, table, "N2", "a", "b"),
        ]
        ledger = RiskLedger(budget=100.0)
        for p in seq:
            ledger = charge(ledger, p)
        assert ledger.spent == sequence_risk(corpus, table, seq)


class TestLedger:
    def test_rejects_over_budget(self):
        p = Perturbation(news="n", old_word="x", new_word="y", cost=0.6)
        ledger = charge(RiskLedger(budget=1.0), p)
        assert ledger is not None
        assert charge(ledger, p) is None
        assert ledger.spent == pytest.approx(0.6)  # unchanged by the failed charge

    def test_paper_default_budget_accepts_thirty_cheap_charges(self):
        ledger = RiskLedger(budget=40.0)
        p = Perturbation(news="n", old_word="x", new_word="y", cost=1.3)
        for _ in range(30):
            ledger = charge(ledger, p)
            assert ledger is not None

    def test_exact_remaining_accepted(self):
        ledger = RiskLedger(budget=1.0)
        ledger = charge(ledger, Perturbation(news="n", old_word="x", new_word="y", cost=0.25))
        ledger = charge(ledger, Perturbation(news="n", old_word="x", new_word="y", cost=0.75))
        assert ledger is not None
        assert ledger.spent == pytest.approx(1.0)

    @given(st.lists(st.floats(min_value=0.001, max_value=2.0, allow_nan=False), max_size=60))
    @settings(max_examples=60, deadline=None)
    def test_spend_never_exceeds_budget(self, costs):
        ledger = RiskLedger(budget=5.0)
        for c in costs:
            nxt = charge(ledger, Perturbation(news="n", old_word="x", new_word="y", cost=c))
            if nxt is not None:
                ledger = nxt
            assert ledger.spent <= ledger.budget

    def test_history_consistent_with_spend(self):
        corpus, table = freq_corpus(), vec_table()
        ledger = RiskLedger(budget=10.0)
        for words in (("a", "b"), ("b", "c")):
            ledger = charge(ledger, make_perturbation(corpus, table, "N2", *words))
        assert ledger.spent == pytest.approx(sum(p.cost for p in ledger.history))


class TestEffectiveness:
    def test_news_effectiveness_ratio(self):
        corpus, table = freq_corpus(), vec_table()
        # N2 freq=0.25; distance(N2, C1): mean title (a,a,b,b)=(.5,.5), C1=(-1,0)
        from poisonbench.embeddings import news_distance

        d = news_distance(table, corpus.articles["N2"], corpus.articles["C1"])
        assert news_effectiveness(corpus, table, "N2", "C1") == pytest.approx(0.25 / d)

    def test_distance_clamp(self):
        articles = {
            "N1": NewsArticle(id="N1", title=("a",)),
            "C1": NewsArticle(id="C1", title=("a",)),  # identical embedding, distance 0
        }
        corpus = Corpus(
            articles=articles,
            histories=(ClickHistory(user="U0", clicked=("N1",)),),
            candidates=frozenset({"C1"}),
            target="C1",
        )
        eff = news_effectiveness(corpus, vec_table(), "N1", "C1")
        assert eff == pytest.approx(1.0 / 1e-6)

    def test_monotone_in_frequency(self):
        corpus, table = freq_corpus(), vec_table()
        assert news_effectiveness(corpus, table, "N1", "C1") > news_effectiveness(corpus, table, "N2", "C1")

    def test_word_effectiveness_counts_occurrences(self):
        table = vec_table()
        art1 = NewsArticle(id="n", title=("a", "b", "b", "b"))
        art2 = NewsArticle(id="n", title=("a", "a", "b", "b"))
        one = word_effectiveness(art1, table, "a", "c")
        two = word_effectiveness(art2, table, "a", "c")
        assert two == pytest.approx(2 * one)

    def test_word_effectiveness_hand_value(self):
        table = vec_table()
        art = NewsArticle(id="n", title=tuple(["a"] + ["b"] * 9))
        # freq 1/10, distance(a,b)=0.5 -> 0.2
        assert word_effectiveness(art, table, "a", "b") == pytest.approx(0.2)

    def test_identical_pair_rejected(self):
        art = NewsArticle(id="n", title=("a", "b"))
        with pytest.raises(ValueError):
            word_effectiveness(art, vec_table(), "a", "a")

    def test_effectiveness_always_finite(self):
        corpus = synth_corpus(seed=2, n_users=10, n_news=15, n_candidates=3, title_len=4, vocab_size=50)
        table = EmbeddingTable(dim=8)
        vals = [news_effectiveness(corpus, table, n, corpus.target) for n in corpus.viewed_ids]
        assert np.all(np.isfinite(vals))


class TestSequenceIO:
    def test_round_trip(self, tmp_path):
        corpus, table = freq_corpus(), vec_table()
        seq = (
            make_perturbation(corpus, table, "N1", "a", "c"),
            make_perturbation(corpus, table, "N2", "b", "c"),
        )
        path = tmp_path / "seq.tsv"
        save_sequence(seq, path)
        assert load_sequence(path) == seq

    def test_risk_bounds_on_synth(self):
        corpus = synth_corpus(seed=8, n_users=25, n_news=30, n_candidates=5, title_len=6, vocab_size=100)
        table = EmbeddingTable(dim=8)
        target_title = corpus.articles[corpus.target].title
        rng = np.random.default_rng(0)
        for _ in range(50):
            nid = corpus.viewed_ids[rng.integers(len(corpus.viewed_ids))]
            old = corpus.articles[nid].title[rng.integers(len(corpus.articles[nid].title))]
            new = target_title[rng.integers(len(target_title))]
            if old == new:
                continue
            p = make_perturbation(corpus, table, nid, old, new)
            assert 1 / corpus.n_users <= p.cost <= 2.0
