"""Exposure-risk accounting and the effectiveness scores that order actions.

The cost of replacing word ``w_i`` of a viewed news ``o`` with ``w_j`` is
``click_frequency(o) + word_distance(w_i, w_j)``: popular news are riskier to
touch and dissimilar replacements are easier to spot.  Sequence risk is the
sum of member costs, which matches the per-step budget subtraction
``C_t = C_{t-1} - cost``.  Frequencies always come from the clean corpus:
they count clicks, which content edits cannot change.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Iterable, Optional

from .corpus import Corpus, WordNotInTitle, click_frequency
from .embeddings import EmbeddingTable, news_distance, word_distance

EFFECTIVENESS_EPS = 1e-6  # clamp on distance denominators


class RiskMode(enum.Enum):
    """Cost variants for the ablation study: drop one of the two terms."""

    FULL = "full"
    NO_FREQUENCY = "no_frequency"
    NO_SIMILARITY = "no_similarity"


@dataclass(frozen=True)
class Perturbation:
    """One word replacement on a viewed news, with its cached exposure cost.

    ``old_word != new_word`` and ``cost = frequency + word distance`` are
    guaranteed when built via :func:`make_perturbation`; constructing the raw
    dataclass directly bypasses validation (used only by tests that exercise
    degenerate inputs).
    """

    news: str
    old_word: str
    new_word: str
    cost: float


def make_perturbation(
    corpus: Corpus,
    table: EmbeddingTable,
    news: str,
    old_word: str,
    new_word: str,
    mode: RiskMode = RiskMode.FULL,
) -> Perturbation:
    """Validated constructor: checks membership and computes the cost."""
    if old_word == new_word:
        raise ValueError(f"identity replacement {old_word!r} has no attack value")
    if old_word not in corpus.articles[news].title:
        raise WordNotInTitle(f"{old_word!r} not in title of {news}")
    p = Perturbation(news=news, old_word=old_word, new_word=new_word, cost=0.0)
    return replace(p, cost=perturbation_risk(corpus, table, p, mode))


def perturbation_risk(
    corpus: Corpus,
    table: EmbeddingTable,
    p: Perturbation,
    mode: RiskMode = RiskMode.FULL,
) -> float:
    """Frequency term plus normalized word cosine distance (mode may drop one)."""
    freq = click_frequency(corpus, p.news)
    if mode is RiskMode.NO_FREQUENCY:
        return word_distance(table, p.old_word, p.new_word)
    if mode is RiskMode.NO_SIMILARITY:
        return freq
    return freq + word_distance(table, p.old_word, p.new_word)


def perturbation_risk_news_level(
    corpus: Corpus,
    table: EmbeddingTable,
    news: str,
    perturbed_title: tuple[str, ...],
) -> float:
    """General news-level risk form: frequency plus whole-title distance.

    Exposed as an alternative to the word-level cost but unused by default.
    """
    before = corpus.articles[news]
    after = replace(before, title=perturbed_title)
    return click_frequency(corpus, news) + news_distance(table, before, after)


def sequence_risk(
    corpus: Corpus,
    table: EmbeddingTable,
    seq: Iterable[Perturbation],
    mode: RiskMode = RiskMode.FULL,
) -> float:
    """Sum of member risks, each against the original corpus frequencies.

    Left-fold addition, so the total agrees bitwise with a ledger that charged
    the same perturbations one by one.
    """
    total = 0.0
    for p in seq:
        total = total + perturbation_risk(corpus, table, p, mode)
    return total


@dataclass(frozen=True)
class RiskLedger:
    """Budget C-bar, spend so far and the charged history, in order."""

    budget: float
    spent: float = 0.0
    history: tuple[Perturbation, ...] = ()

    @property
    def remaining(self) -> float:
        return self.budget - self.spent


def charge(ledger: RiskLedger, p: Perturbation) -> Optional[RiskLedger]:
    """Charge ``p.cost`` to the ledger; ``None`` means insufficient budget.

    The boundary is inclusive: a cost exactly equal to the remaining budget is
    accepted.  An insufficient charge leaves the ledger unchanged and signals
    episode termination, not a fault.
    """
    spent = ledger.spent + p.cost
    if spent > ledger.budget:
        return None
    return RiskLedger(budget=ledger.budget, spent=spent, history=ledger.history + (p,))


def news_effectiveness(corpus: Corpus, table: EmbeddingTable, news: str, target: str) -> float:
    """frequency / distance-to-target for a viewed news, distance clamped at eps."""
    freq = click_frequency(corpus, news)
    dist = news_distance(table, corpus.articles[news], corpus.articles[target])
    return freq / max(dist, EFFECTIVENESS_EPS)


def word_effectiveness(article, table: EmbeddingTable, w_i: str, w_j: str) -> float:
    """In-title frequency of w_i over its distance to the target word w_j."""
    if w_i == w_j:
        raise ValueError("identical-word pairs are excluded from the action set")
    count = article.title.count(w_i)
    if count == 0:
        raise WordNotInTitle(f"{w_i!r} not in title of {article.id}")
    freq = count / len(article.title)
    return freq / max(word_distance(table, w_i, w_j), EFFECTIVENESS_EPS)


def save_sequence(seq: Iterable[Perturbation], path) -> None:
    """Write the canonical attack artifact: ``news \\t old \\t new \\t cost`` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in seq:
            fh.write(f"{p.news}\t{p.old_word}\t{p.new_word}\t{p.cost!r}\n")


def load_sequence(path) -> tuple[Perturbation, ...]:
    """Read a perturbation sequence written by :func:`save_sequence`."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            news, old_word, new_word, cost = line.rstrip("\n").split("\t")
            out.append(Perturbation(news=news, old_word=old_word, new_word=new_word, cost=float(cost)))
    return tuple(out)
