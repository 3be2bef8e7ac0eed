"""Two-stage hierarchical action structure over heap-shaped binary trees.

A tree over ``n`` actions has ``2n - 1`` nodes in 1-based heap layout
(children of ``i`` at ``2i`` and ``2i + 1``): internal nodes are ``1..n-1``
and leaves are ``n..2n-1``.  The *visual* left-to-right leaf order is the
deepest layer first (left-aligned), then the shallower trailing leaves;
leaves receive actions in descending effectiveness along that order, so a
root-to-leaf walk needs only ``ceil(log2 n)`` left/right decisions.

Leaf embeddings are data (news embeddings, or word-pair vector means);
internal-node embeddings are trainable policy parameters, randomly
initialized uniform in [-0.5, 0.5]^dim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .embeddings import EmbeddingTable, news_embedding, word_vector
from .risk import news_effectiveness, word_effectiveness


class EmptyTree(ValueError):
    """Sampling was requested on a tree with no nodes."""


class NoValidPairs(ValueError):
    """Every (title word, target word) pair is an identical-word pair."""


def heap_depth(n_leaves: int) -> int:
    """Root-to-leaf decision count: ceil(log2 n); 0 for a single leaf."""
    if n_leaves < 1:
        raise ValueError("need at least one leaf")
    return math.ceil(math.log2(n_leaves)) if n_leaves > 1 else 0


def visual_leaf_order(n_leaves: int) -> list[int]:
    """Heap indices of the leaves in visual left-to-right order.

    Deepest-layer leaves (indices ``2^dmax .. 2n-1``) come first, then the
    trailing leaves one level up (``n .. 2^dmax - 1``).
    """
    n = n_leaves
    if n == 1:
        return [1]
    dmax = (2 * n - 1).bit_length() - 1  # floor(log2(2n-1))
    split = 1 << dmax
    return list(range(split, 2 * n)) + list(range(n, split))


@dataclass
class EffTree:
    """Heap-layout tree: ``embeddings[i]`` is node ``i``'s vector (row 0 unused).

    ``leaf_payload`` maps leaf heap indices to actions (a news id, or a
    ``(old_word, new_word)`` pair); ``leaf_effectiveness`` mirrors it for
    invariant checks.  ``trainable`` flags the internal nodes whose embeddings
    belong to the policy parameter vector.
    """

    n_leaves: int
    dim: int
    embeddings: np.ndarray
    leaf_payload: dict[int, object]
    leaf_effectiveness: dict[int, float] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return 2 * self.n_leaves - 1

    def is_leaf(self, i: int) -> bool:
        return i >= self.n_leaves

    @property
    def trainable(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes + 1, dtype=bool)
        mask[1 : self.n_leaves] = True
        return mask

    def leaves_in_visual_order(self) -> list[int]:
        return visual_leaf_order(self.n_leaves)


def _build(actions, embeddings_for, effectiveness_for, dim, seed, random_order: bool):
    """Shared builder: sort (or shuffle) actions, then fill the heap layout."""
    rng = np.random.default_rng(seed)
    if random_order:
        order = list(rng.permutation(len(actions)))
        ordered = [actions[i] for i in order]
    else:
        ordered = sorted(actions, key=lambda a: (-effectiveness_for(a), a))
    n = len(ordered)
    emb = np.zeros((2 * n, dim))
    if n > 1:
        emb[1:n] = rng.uniform(-0.5, 0.5, size=(n - 1, dim))
    payload, eff = {}, {}
    for slot, action in zip(visual_leaf_order(n), ordered):
        payload[slot] = action
        eff[slot] = effectiveness_for(action)
        emb[slot] = embeddings_for(action)
    return EffTree(n_leaves=n, dim=dim, embeddings=emb, leaf_payload=payload, leaf_effectiveness=eff)


def build_news_tree(
    corpus: Corpus,
    table: EmbeddingTable,
    target: str,
    seed: int,
    random_order: bool = False,
) -> EffTree:
    """Stage-1 tree: leaves are all viewed news, sorted by descending effectiveness."""
    actions = list(corpus.viewed_ids)
    if not actions:
        raise EmptyTree("viewed set is empty")
    return _build(
        actions,
        embeddings_for=lambda nid: news_embedding(table, corpus.articles[nid]),
        effectiveness_for=lambda nid: news_effectiveness(corpus, table, nid, target),
        dim=table.dim,
        seed=seed,
        random_order=random_order,
    )


def content_pairs(article, target_article) -> list[tuple[str, str]]:
    """Distinct (title word, target word) replacement pairs, identity excluded."""
    seen_src: list[str] = []
    for tok in article.title:
        if tok not in seen_src:
            seen_src.append(tok)
    seen_dst: list[str] = []
    for tok in target_article.title:
        if tok not in seen_dst:
            seen_dst.append(tok)
    return [(wi, wj) for wi in seen_src for wj in seen_dst if wi != wj]


def build_content_tree(
    article,
    target_article,
    table: EmbeddingTable,
    seed: int,
    random_order: bool = False,
) -> EffTree:
    """Stage-2 tree over word-replacement pairs for one (news, target).

    Leaf embedding is the mean of the two word vectors; the root reuses the
    news embedding (the stage-1 leaf it hangs from), which sampling never
    reads but keeps the two stages glued the way the construction describes.
    """
    pairs = content_pairs(article, target_article)
    if not pairs:
        raise NoValidPairs(f"{article.id} vs {target_article.id}: only identical-word pairs")
    tree = _build(
        pairs,
        embeddings_for=lambda p: 0.5 * (word_vector(table, p[0]) + word_vector(table, p[1])),
        effectiveness_for=lambda p: word_effectiveness(article, table, p[0], p[1]),
        dim=table.dim,
        seed=seed,
        random_order=random_order,
    )
    if tree.n_leaves > 1:
        tree.embeddings[1] = news_embedding(table, article)
    return tree


def sample_path(
    tree: EffTree,
    score_vector: np.ndarray,
    mode: str,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
):
    """Walk root to leaf comparing children scores ``score_vector . e_node``.

    ``mode`` is ``"greedy"`` (argmax, ties go left) or ``"boltzmann"``
    (left with probability ``exp(s_L/tau) / (exp(s_L/tau) + exp(s_R/tau))``).
    Returns ``(leaf payload, visited node indices, chosen-node scores)`` where
    the visited list holds the chosen child of every decision, ending in the
    leaf.
    """
    if tree.n_leaves < 1:
        raise EmptyTree("cannot sample from an empty tree")
    if score_vector.shape != (tree.dim,):
        raise ValueError(f"score vector has shape {score_vector.shape}, tree dim is {tree.dim}")
    if mode == "boltzmann" and rng is None:
        raise ValueError("boltzmann sampling needs an rng")
    node = 1
    visited: list[int] = []
    scores: list[float] = []
    while not tree.is_leaf(node):
        left, right = 2 * node, 2 * node + 1
        # heap layout guarantees both children exist for every internal node
        assert right <= tree.n_nodes
        s_left = float(score_vector @ tree.embeddings[left])
        s_right = float(score_vector @ tree.embeddings[right])
        if mode == "greedy":
            take_left = s_left >= s_right
        elif mode == "boltzmann":
            p_left = 1.0 / (1.0 + math.exp(-(s_left - s_right) / temperature))
            take_left = rng.random() < p_left
        else:
            raise ValueError(f"unknown sampling mode {mode!r}")
        node = left if take_left else right
        visited.append(node)
        scores.append(s_left if take_left else s_right)
    if node == 1:  # single-leaf tree: the root itself is the action
        visited.append(node)
        scores.append(float(score_vector @ tree.embeddings[node]))
    return tree.leaf_payload[node], visited, scores


def leaf_probabilities(tree: EffTree, score_vector: np.ndarray, temperature: float) -> dict[int, float]:
    """Exhaustive Boltzmann path probabilities per leaf (for small trees/tests)."""
    out: dict[int, float] = {}

    def walk(node: int, prob: float):
        if tree.is_leaf(node):
            out[node] = prob
            return
        left, right = 2 * node, 2 * node + 1
        s_left = float(score_vector @ tree.embeddings[left])
        s_right = float(score_vector @ tree.embeddings[right])
        p_left = 1.0 / (1.0 + math.exp(-(s_left - s_right) / temperature))
        walk(left, prob * p_left)
        walk(right, prob * (1.0 - p_left))

    walk(1, 1.0)
    return out


def evaluations_per_action(news_count: int, pair_count: int) -> int:
    """Decision evaluations per sampled action: news-tree depth + content-tree depth."""
    total = heap_depth(news_count) + heap_depth(pair_count)
    assert total <= math.ceil(math.log2(max(news_count, 1)) if news_count > 1 else 0) + math.ceil(
        math.log2(max(pair_count, 1)) if pair_count > 1 else 0
    ) + 2
    return total
