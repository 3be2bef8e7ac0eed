"""Data model for users, news, histories and candidates, plus ingestion.

Two ways to get a :class:`Corpus`: load MIND-style tab-separated files
(``load_corpus``) or generate a seeded synthetic corpus (``synth_corpus``).
Synthetic corpora serialize back to the same file format (``write_corpus``)
so every downstream path is format-agnostic.

Corpora are immutable; ``apply_perturbation`` returns a new value.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np


class MalformedLine(ValueError):
    """A news line is missing columns or yields an empty title."""


class DuplicateId(ValueError):
    """The same news id appears twice in one news file."""


class UnknownNewsId(KeyError):
    """A history references a news id that is not in the loaded news set."""


class MalformedImpression(ValueError):
    """An impression token is not of the form ``<id>-0`` or ``<id>-1``."""


class NotInViewedSet(KeyError):
    """A news id is not in the viewed set A^r (union of all click histories)."""


class WordNotInTitle(ValueError):
    """A perturbation names a word that does not occur in the current title."""


class TargetNotInCandidates(ValueError):
    """The promotion target is not a member of the candidate set."""


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return tuple(tok for tok in text.lower().translate(_PUNCT_TABLE).split() if tok)


@dataclass(frozen=True)
class NewsArticle:
    """One news item: opaque id plus an ordered tuple of lowercase title tokens."""

    id: str
    title: tuple[str, ...]
    category: str | None = None


@dataclass(frozen=True)
class ClickHistory:
    """One user's ordered clicked news ids and optional impression log."""

    user: str
    clicked: tuple[str, ...]
    impressions: tuple[tuple[str, int], ...] | None = None


@dataclass(frozen=True)
class Corpus:
    """Articles, histories, the candidate set A^c and the promotion target o*.

    The viewed set A^r is derived as the union of all clicked lists.  The
    target is always a candidate and never a member of A^r: the attack
    perturbs history news toward a candidate, and a target inside A^r would
    make its self-distance (and hence effectiveness) degenerate.
    """

    articles: dict[str, NewsArticle]
    histories: tuple[ClickHistory, ...]
    candidates: frozenset[str]
    target: str

    def __post_init__(self):
        for hist in self.histories:
            for nid in hist.clicked:
                if nid not in self.articles:
                    raise UnknownNewsId(nid)
        for cid in self.candidates:
            if cid not in self.articles:
                raise UnknownNewsId(cid)
        if self.target not in self.candidates:
            raise TargetNotInCandidates(self.target)
        if any(self.target in hist.clicked for hist in self.histories):
            raise ValueError(f"target {self.target!r} must not appear in any click history")

    @cached_property
    def viewed(self) -> frozenset[str]:
        """A^r: every news id clicked by at least one user."""
        out: set[str] = set()
        for hist in self.histories:
            out.update(hist.clicked)
        return frozenset(out)

    @cached_property
    def viewed_ids(self) -> tuple[str, ...]:
        """A^r in sorted order, for deterministic iteration."""
        return tuple(sorted(self.viewed))

    @cached_property
    def click_counts(self) -> dict[str, int]:
        """News id -> number of distinct users whose history contains it."""
        counts: Counter[str] = Counter()
        for hist in self.histories:
            counts.update(set(hist.clicked))
        return dict(counts)

    @property
    def n_users(self) -> int:
        return len(self.histories)


def load_news(path) -> list[NewsArticle]:
    """Parse a MIND-style news file: ``id \\t category \\t subcategory \\t title [\\t ...]``."""
    out: list[NewsArticle] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) < 4:
                raise MalformedLine(f"line {lineno}: expected >= 4 tab-separated columns, got {len(cols)}")
            nid, category, _subcategory, title = cols[0], cols[1], cols[2], cols[3]
            if nid in seen:
                raise DuplicateId(nid)
            tokens = tokenize(title)
            if not tokens:
                raise MalformedLine(f"line {lineno}: title is empty after tokenization")
            seen.add(nid)
            out.append(NewsArticle(id=nid, title=tokens, category=category or None))
    return out


def _parse_impression(token: str) -> tuple[str, int]:
    nid, sep, flag = token.rpartition("-")
    if not sep or flag not in ("0", "1"):
        raise MalformedImpression(token)
    return nid, int(flag)


def load_behaviors(path, articles: dict[str, NewsArticle]) -> list[ClickHistory]:
    """Parse a MIND-style behaviors file into one merged history per user.

    Multiple lines for one user merge in first-seen order with duplicate
    clicks dropped (first occurrence kept).
    """
    clicked_by_user: dict[str, list[str]] = {}
    impressions_by_user: dict[str, list[tuple[str, int]]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            cols = line.rstrip("\n").split("\t")
            # impression id and timestamp columns are ignored; short rows mean empty fields
            if len(cols) < 5:
                cols = cols + [""] * (5 - len(cols))
            _, user, _, history, impressions = cols[0], cols[1], cols[2], cols[3], cols[4]
            if user not in clicked_by_user:
                clicked_by_user[user] = []
                impressions_by_user[user] = []
                order.append(user)
            for nid in history.split():
                if nid not in articles:
                    raise UnknownNewsId(nid)
                if nid not in clicked_by_user[user]:
                    clicked_by_user[user].append(nid)
            for token in impressions.split():
                nid, flag = _parse_impression(token)
                if nid not in articles:
                    raise UnknownNewsId(nid)
                if all(nid != seen for seen, _ in impressions_by_user[user]):
                    impressions_by_user[user].append((nid, flag))
    return [
        ClickHistory(
            user=user,
            clicked=tuple(clicked_by_user[user]),
            impressions=tuple(impressions_by_user[user]) or None,
        )
        for user in order
    ]


def load_corpus(news_path, behaviors_path, target: str) -> Corpus:
    """Assemble a corpus from files; candidates are the union of impression ids."""
    articles = {art.id: art for art in load_news(news_path)}
    histories = load_behaviors(behaviors_path, articles)
    candidates: set[str] = set()
    for hist in histories:
        for nid, _ in hist.impressions or ():
            candidates.add(nid)
    return Corpus(
        articles=articles,
        histories=tuple(histories),
        candidates=frozenset(candidates),
        target=target,
    )


def write_corpus(corpus: Corpus, news_path, behaviors_path) -> None:
    """Serialize to MIND-style files; deterministic bytes for equal corpora."""
    with open(news_path, "w", encoding="utf-8") as fh:
        for art in corpus.articles.values():
            fh.write(f"{art.id}\t{art.category or '-'}\t-\t{' '.join(art.title)}\n")
    with open(behaviors_path, "w", encoding="utf-8") as fh:
        for i, hist in enumerate(corpus.histories, start=1):
            if hist.impressions is not None:
                imps = " ".join(f"{nid}-{flag}" for nid, flag in hist.impressions)
            else:
                imps = " ".join(f"{cid}-0" for cid in sorted(corpus.candidates))
            fh.write(f"{i}\t{hist.user}\t0\t{' '.join(hist.clicked)}\t{imps}\n")


def click_frequency(corpus: Corpus, news_id: str) -> float:
    """Share of users whose click history contains ``news_id``."""
    if news_id not in corpus.viewed:
        raise NotInViewedSet(news_id)
    return corpus.click_counts[news_id] / corpus.n_users


def apply_perturbation(corpus: Corpus, p) -> Corpus:
    """Replace the first occurrence of ``p.old_word`` in ``p.news``'s title.

    Pure: returns a new corpus, the input is untouched.  Title length is
    preserved.  ``p`` only needs ``news``/``old_word``/``new_word`` fields.
    """
    if p.news not in corpus.viewed:
        raise NotInViewedSet(p.news)
    article = corpus.articles[p.news]
    try:
        pos = article.title.index(p.old_word)
    except ValueError:
        raise WordNotInTitle(f"{p.old_word!r} not in title of {p.news}") from None
    new_title = article.title[:pos] + (p.new_word,) + article.title[pos + 1 :]
    new_articles = dict(corpus.articles)
    new_articles[p.news] = replace(article, title=new_title)
    return replace(corpus, articles=new_articles)


def synth_corpus(
    seed: int,
    n_users: int,
    n_news: int,
    n_candidates: int,
    title_len: int,
    vocab_size: int,
) -> Corpus:
    """Seeded synthetic corpus with a power-law popularity skew.

    The vocabulary is partitioned into topics; each news draws its title from
    one topic's token block and each user prefers a couple of topics, so click
    histories carry a content signal (token overlap) that small models can
    learn.  Every pool news ends up in at least one history, so A^r equals the
    pool and click frequencies span [1/n_users, ~0.5] under a power-law
    popularity skew.  Candidates (including the target, initially the first
    candidate) are a disjoint set of articles that never appear in histories;
    the pool spans the topics evenly.
    """
    if min(n_users, n_news, n_candidates, title_len, vocab_size) < 1:
        raise ValueError("all synth_corpus counts must be >= 1")
    n_topics = max(1, min(16, vocab_size // max(title_len, 4)))
    block = vocab_size // n_topics
    if block < title_len:
        raise ValueError(f"vocab_size {vocab_size} too small for title_len {title_len}")
    rng = np.random.default_rng(seed)

    vocab = [f"w{i:04d}" for i in range(vocab_size)]

    def make_title(topic: int) -> tuple[str, ...]:
        lo = topic * block
        toks = lo + _zipf_sample(rng, block, title_len)
        return tuple(vocab[t] for t in toks)

    articles: dict[str, NewsArticle] = {}
    pool_ids, pool_topics = [], []
    for i in range(n_news):
        topic = int(rng.integers(n_topics))
        nid = f"N{i:04d}"
        articles[nid] = NewsArticle(id=nid, title=make_title(topic), category=f"t{topic}")
        pool_ids.append(nid)
        pool_topics.append(topic)
    candidate_ids = []
    for i in range(n_candidates):
        topic = int(rng.integers(n_topics))
        cid = f"C{i:03d}"
        articles[cid] = NewsArticle(id=cid, title=make_title(topic), category=f"t{topic}")
        candidate_ids.append(cid)

    # Popularity over the pool: permuted power law so ids carry no rank info.
    # Exponent 0.75 puts the most-clicked news near frequency 0.5 at the
    # reference scale while keeping the mass spread smoothly across ranks.
    ranks = rng.permutation(n_news)
    popularity = (1.0 + ranks.astype(np.float64)) ** -0.75
    topics_arr = np.array(pool_topics)

    clicked_lists: list[list[str]] = []
    for _ in range(n_users):
        liked = rng.choice(n_topics, size=min(2, n_topics), replace=False)
        affinity = np.where(np.isin(topics_arr, liked), 3.0, 1.0)
        weights = popularity * affinity
        weights /= weights.sum()
        n_clicks = int(rng.integers(8, 17)) if n_news >= 17 else min(n_news, 4)
        picks = rng.choice(n_news, size=min(n_clicks, n_news), replace=False, p=weights)
        clicked_lists.append([pool_ids[j] for j in picks])

    # Coverage pass: every pool news must be viewed by someone.
    seen = {nid for lst in clicked_lists for nid in lst}
    for i, nid in enumerate(pool_ids):
        if nid not in seen:
            clicked_lists[int(rng.integers(n_users))].append(nid)

    imps = tuple((cid, 0) for cid in candidate_ids)
    histories = tuple(
        ClickHistory(user=f"U{i:03d}", clicked=tuple(lst), impressions=imps)
        for i, lst in enumerate(clicked_lists)
    )
    return Corpus(
        articles=articles,
        histories=histories,
        candidates=frozenset(candidate_ids),
        target=candidate_ids[0],
    )


def _zipf_sample(rng: np.random.Generator, block: int, k: int) -> np.ndarray:
    """k distinct indices in [0, block) with Zipf-ish weighting."""
    weights = (1.0 + np.arange(block)) ** -0.7
    weights /= weights.sum()
    return rng.choice(block, size=k, replace=False, p=weights)


def synth_vocab_vectors(seed: int, vocab_size: int, title_len: int, dim: int) -> dict[str, np.ndarray]:
    """Topic-clustered unit vectors for the synthetic vocabulary.

    Tokens of one topic block sit near a common direction (near-synonyms,
    cosine distance ~0.1) while cross-topic tokens are nearly orthogonal
    (~0.5), mirroring how real word embeddings cluster.  Uses the same
    topic-block partition as :func:`synth_corpus`.
    """
    n_topics = max(1, min(16, vocab_size // max(title_len, 4)))
    block = vocab_size // n_topics
    rng = np.random.default_rng([seed, 1])
    centers = rng.standard_normal((n_topics, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    spread = 1.4  # unit-noise mix: within-topic cosine distance ~0.3, cross-topic ~0.55
    out: dict[str, np.ndarray] = {}
    for i in range(vocab_size):
        topic = min(i // block, n_topics - 1)
        noise = rng.standard_normal(dim)
        vec = centers[topic] + spread * noise / np.linalg.norm(noise)
        out[f"w{i:04d}"] = vec / np.linalg.norm(vec)
    return out
