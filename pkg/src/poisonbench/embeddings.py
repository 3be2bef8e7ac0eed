"""Word-vector storage and the cosine distances used everywhere else.

Distances are normalized cosine distances in [0, 1]: ``(1 - cos) / 2``.
Tokens missing from the table get a deterministic unit-norm pseudo-random
vector seeded by a hash of the token, so synthetic corpora work without any
embedding file.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class DimensionMismatch(ValueError):
    """A line in an embedding file has the wrong number of components."""


class ParseError(ValueError):
    """A line in an embedding file could not be parsed."""


@dataclass
class EmbeddingTable:
    """Token -> dense vector map with a fixed dimension.

    The table is immutable after load; ``word_vector`` memoizes hashed
    out-of-vocabulary vectors and unit-normalized copies in private caches,
    which is the only mutation and is idempotent (same token always maps to
    the same vectors).
    """

    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    _oov_cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _unit_cache: dict[str, np.ndarray | None] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"embedding dim must be >= 1, got {self.dim}")
        for tok, vec in self.vectors.items():
            if vec.shape != (self.dim,):
                raise DimensionMismatch(f"vector for {tok!r} has shape {vec.shape}, want ({self.dim},)")


def load_embeddings(path, dim: int) -> EmbeddingTable:
    """Read a plain-text embedding file: one ``token v1 .. v_dim`` line each.

    Later duplicates of a token are ignored (first occurrence kept).
    """
    vectors: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise DimensionMismatch(f"line {lineno}: expected {dim + 1} fields, got {len(parts)}")
            token = parts[0]
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
            if token not in vectors:
                vectors[token] = vec
    return EmbeddingTable(dim=dim, vectors=vectors)


def _hash_vector(token: str, dim: int) -> np.ndarray:
    # Stable across runs and platforms: seed an RNG from sha256 of the token.
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    vec = rng.standard_normal(dim)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:  # astronomically unlikely; keep the convention explicit
        vec = np.zeros(dim)
        vec[0] = 1.0
        return vec
    return vec / norm


def save_embeddings(vectors: dict[str, np.ndarray], path) -> None:
    """Write a plain-text embedding file; full-precision floats round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in vectors.items():
            fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def word_vector(table: EmbeddingTable, token: str) -> np.ndarray:
    """Stored vector if present, otherwise a deterministic hashed unit vector."""
    vec = table.vectors.get(token)
    if vec is not None:
        return vec
    cached = table._oov_cache.get(token)
    if cached is None:
        cached = _hash_vector(token, table.dim)
        table._oov_cache[token] = cached
    return cached


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cosine distance ``(1 - cos(a, b)) / 2`` in [0, 1].

    Zero vectors have no direction; by convention they are at distance 0.5
    from everything (including themselves).
    """
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.5
    cos = float(np.dot(a, b)) / (na * nb)
    cos = min(1.0, max(-1.0, cos))
    return (1.0 - cos) / 2.0


def _unit_vector(table: EmbeddingTable, token: str) -> np.ndarray | None:
    """Unit-normalized token vector, memoized; None marks a zero vector."""
    unit = table._unit_cache.get(token, False)
    if unit is not False:
        return unit
    vec = word_vector(table, token)
    norm = float(np.linalg.norm(vec))
    unit = None if norm == 0.0 else vec / norm
    table._unit_cache[token] = unit
    return unit


def word_distance(table: EmbeddingTable, w_i: str, w_j: str) -> float:
    """Normalized cosine distance between two tokens' vectors."""
    ui = _unit_vector(table, w_i)
    uj = _unit_vector(table, w_j)
    if ui is None or uj is None:
        return 0.5
    if w_i == w_j:
        return 0.0
    cos = min(1.0, max(-1.0, float(ui @ uj)))
    return (1.0 - cos) / 2.0


def news_embedding(table: EmbeddingTable, article) -> np.ndarray:
    """Arithmetic mean of the title-token vectors."""
    if not article.title:
        raise ValueError(f"article {article.id!r} has an empty title")
    acc = np.zeros(table.dim)
    for tok in article.title:
        acc += word_vector(table, tok)
    return acc / len(article.title)


def news_distance(table: EmbeddingTable, o_a, o_b) -> float:
    """Normalized cosine distance between two articles' title-mean embeddings."""
    return cosine_distance(news_embedding(table, o_a), news_embedding(table, o_b))
