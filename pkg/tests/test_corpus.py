import numpy as np
import pytest

from poisonbench.corpus import (
    ClickHistory,
    Corpus,
    MalformedImpression,
    MalformedLine,
    NewsArticle,
    NotInViewedSet,
    WordNotInTitle,
    apply_perturbation,
    click_frequency,
    load_behaviors,
    load_corpus,
    load_news,
    synth_corpus,
    tokenize,
    write_corpus,
)
from poisonbench.risk import Perturbation


def tiny_corpus():
    articles = {
        "N1": NewsArticle(id="N1", title=("team", "wins", "final")),
        "N2": NewsArticle(id="N2", title=("rain", "all", "week")),
        "N3": NewsArticle(id="N3", title=("a", "b", "a")),
        "C1": NewsArticle(id="C1", title=("target", "story")),
    }
    histories = (
        ClickHistory(user="U1", clicked=("N1", "N2")),
        ClickHistory(user="U2", clicked=("N1",)),
        ClickHistory(user="U3", clicked=("N3",)),
        ClickHistory(user="U4", clicked=("N1", "N3")),
    )
    return Corpus(articles=articles, histories=histories, candidates=frozenset({"C1"}), target="C1")


class TestTokenize:
    def test_lowercase_strip_punct(self):
        assert tokenize("Team Wins, Final!") == ("team", "wins", "final")

    def test_whitespace_only(self):
        assert tokenize("  \t ") == ()


class TestLoadNews:
    def test_parses_line(self, tmp_path):
        p = tmp_path / "news.tsv"
        p.write_text("N1\tsports\tsoccer\tTeam Wins Final\n")
        arts = load_news(p)
        assert arts[0].id == "N1"
        assert arts[0].title == ("team", "wins", "final")

    def test_empty_file(self, tmp_path):
        p = tmp_path / "news.tsv"
        p.write_text("")
        assert load_news(p) == []

    def test_three_columns_malformed(self, tmp_path):
        p = tmp_path / "news.tsv"
        p.write_text("N1\tsports\tsoccer\n")
        with pytest.raises(MalformedLine):
            load_news(p)

    def test_extra_columns_ignored(self, tmp_path):
        p = tmp_path / "news.tsv"
        p.write_text("N1\tsports\tsoccer\tBig Game\tabstract here\turl\n")
        assert load_news(p)[0].title == ("big", "game")


class TestLoadBehaviors:
    def articles(self):
        return {n: NewsArticle(id=n, title=("t",)) for n in ("N1", "N2", "N3", "N4")}

    def test_parses_history_and_impressions(self, tmp_path):
        p = tmp_path / "behaviors.tsv"
        p.write_text("1\tU1\tt\tN1 N2\tN3-1 N4-0\n")
        hists = load_behaviors(p, self.articles())
        assert hists[0].user == "U1"
        assert hists[0].clicked == ("N1", "N2")
        assert hists[0].impressions == (("N3", 1), ("N4", 0))

    def test_multi_line_merge_keeps_first_order(self, tmp_path):
        p = tmp_path / "behaviors.tsv"
        p.write_text("1\tU1\tt\tN1\t\n2\tU1\tt\tN1 N2\t\n")
        hists = load_behaviors(p, self.articles())
        assert len(hists) == 1
        assert hists[0].clicked == ("N1", "N2")

    def test_impression_without_flag(self, tmp_path):
        p = tmp_path / "behaviors.tsv"
        p.write_text("1\tU1\tt\tN1\tN3\n")
        with pytest.raises(MalformedImpression):
            load_behaviors(p, self.articles())


class TestClickFrequency:
    def test_counts_users(self):
        corpus = tiny_corpus()
        assert click_frequency(corpus, "N1") == pytest.approx(3 / 4)
        assert click_frequency(corpus, "N2") == pytest.approx(1 / 4)

    def test_not_in_viewed_set(self):
        with pytest.raises(NotInViewedSet):
            click_frequency(tiny_corpus(), "C1")

    def test_frequency_sums_match_click_totals(self):
        corpus = synth_corpus(seed=3, n_users=30, n_news=40, n_candidates=5, title_len=5, vocab_size=120)
        total = sum(click_frequency(corpus, n) * corpus.n_users for n in corpus.viewed_ids)
        expected = sum(len(set(h.clicked)) for h in corpus.histories)
        assert total == pytest.approx(expected)


class TestApplyPerturbation:
    def test_replaces_first_occurrence(self):
        corpus = tiny_corpus()
        p = Perturbation(news="N3", old_word="a", new_word="c", cost=0.0)
        out = apply_perturbation(corpus, p)
        assert out.articles["N3"].title == ("c", "b", "a")
        assert corpus.articles["N3"].title == ("a", "b", "a")  # input untouched

    def test_identity_replacement_allowed_via_raw_dataclass(self):
        corpus = tiny_corpus()
        p = Perturbation(news="N3", old_word="b", new_word="b", cost=0.0)
        out = apply_perturbation(corpus, p)
        assert out.articles["N3"].title == corpus.articles["N3"].title

    def test_missing_word(self):
        corpus = tiny_corpus()
        p = Perturbation(news="N1", old_word="z", new_word="c", cost=0.0)
        with pytest.raises(WordNotInTitle):
            apply_perturbation(corpus, p)

    def test_pure_and_length_preserving(self):
        corpus = tiny_corpus()
        p = Perturbation(news="N1", old_word="team", new_word="squad", cost=0.0)
        out1 = apply_perturbation(corpus, p)
        out2 = apply_perturbation(corpus, p)
        assert out1.articles["N1"].title == out2.articles["N1"].title
        assert len(out1.articles["N1"].title) == len(corpus.articles["N1"].title)


class TestCorpusInvariants:
    def test_viewed_is_union_of_clicks(self):
        corpus = tiny_corpus()
        assert corpus.viewed == {"N1", "N2", "N3"}

    def test_target_in_history_rejected(self):
        articles = {
            "N1": NewsArticle(id="N1", title=("x",)),
            "C1": NewsArticle(id="C1", title=("y",)),
        }
        with pytest.raises(ValueError):
            Corpus(
                articles=articles,
                histories=(ClickHistory(user="U1", clicked=("C1",)),),
                candidates=frozenset({"C1"}),
                target="C1",
            )


class TestSynthCorpus:
    def test_same_seed_identical(self):
        a = synth_corpus(seed=5, n_users=20, n_news=30, n_candidates=4, title_len=5, vocab_size=100)
        b = synth_corpus(seed=5, n_users=20, n_news=30, n_candidates=4, title_len=5, vocab_size=100)
        assert a.articles == b.articles
        assert a.histories == b.histories
        assert a.candidates == b.candidates

    def test_different_seed_differs(self):
        a = synth_corpus(seed=5, n_users=20, n_news=30, n_candidates=4, title_len=5, vocab_size=100)
        b = synth_corpus(seed=6, n_users=20, n_news=30, n_candidates=4, title_len=5, vocab_size=100)
        assert any(ha.clicked != hb.clicked for ha, hb in zip(a.histories, b.histories))

    def test_single_user_viewed_equals_history(self):
        c = synth_corpus(seed=5, n_users=1, n_news=10, n_candidates=2, title_len=4, vocab_size=60)
        assert c.viewed == set(c.histories[0].clicked)

    def test_every_pool_news_viewed(self):
        c = synth_corpus(seed=9, n_users=40, n_news=60, n_candidates=6, title_len=5, vocab_size=150)
        assert len(c.viewed) == 60
        freqs = [click_frequency(c, n) for n in c.viewed_ids]
        assert min(freqs) >= 1 / c.n_users

    def test_candidates_disjoint_from_viewed(self):
        c = synth_corpus(seed=9, n_users=40, n_news=60, n_candidates=6, title_len=5, vocab_size=150)
        assert not (c.candidates & c.viewed)
        assert c.target in c.candidates


class TestRoundTrip:
    def test_write_load_write_is_stable(self, tmp_path):
        corpus = synth_corpus(seed=4, n_users=15, n_news=25, n_candidates=4, title_len=5, vocab_size=90)
        n1, b1 = tmp_path / "news1.tsv", tmp_path / "beh1.tsv"
        write_corpus(corpus, n1, b1)
        loaded = load_corpus(n1, b1, target=corpus.target)
        assert loaded.viewed == corpus.viewed
        assert loaded.candidates == corpus.candidates
        n2, b2 = tmp_path / "news2.tsv", tmp_path / "beh2.tsv"
        write_corpus(loaded, n2, b2)
        assert n1.read_bytes() == n2.read_bytes()
        assert b1.read_bytes() == b2.read_bytes()
