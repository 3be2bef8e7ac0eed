"""Small differentiable click-probability models with analytic derivatives.

Two model kinds stand in for the paper-scale deep recommenders:

* ``MEANPOOL_LR`` -- logistic regression on the elementwise product of the
  user vector and the candidate news embedding, ``sigmoid(w.(u*c) + b)``.
* ``TINY_MLP`` -- one tanh hidden layer, ``sigmoid(v.tanh(W(u*c) + a) + b)``.
  tanh (not a rectifier) keeps the model twice differentiable everywhere,
  which the influence estimator requires.

All gradients, Hessians and Hessian-vector products are hand-derived and
verified against finite differences in the test suite.  Training is per-user
ADAM on a summed binary cross-entropy with frozen seeded negative samples, so
retraining oracles and influence estimates optimize the identical objective.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .corpus import ClickHistory, Corpus, TargetNotInCandidates
from .embeddings import EmbeddingTable, news_embedding


class DimMismatch(ValueError):
    """Vector or parameter dimensions do not match the model."""


class EmptyHistory(ValueError):
    """A user vector was requested for a user with no clicks."""


class HessianTooLarge(ValueError):
    """Explicit Hessian requested above the configured parameter cap."""


class DivergedLoss(FloatingPointError):
    """Training loss became non-finite."""


class ModelKind(enum.Enum):
    MEANPOOL_LR = "meanpool_lr"
    TINY_MLP = "tiny_mlp"


@dataclass(frozen=True)
class SurrogateModel:
    """Click scorer with a flat parameter vector theta.

    Layouts: MEANPOOL_LR packs ``[w (dim), b]``; TINY_MLP packs
    ``[W (hidden*dim, row-major), a (hidden), v (hidden), b]``.
    """

    kind: ModelKind
    theta: np.ndarray
    dim: int
    hidden: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.theta.shape != (n_params(self.kind, self.dim, self.hidden),):
            raise DimMismatch(
                f"{self.kind.value}: theta has shape {self.theta.shape}, "
                f"want ({n_params(self.kind, self.dim, self.hidden)},)"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta contains non-finite entries")

    @property
    def n_params(self) -> int:
        return self.theta.shape[0]


@dataclass(frozen=True)
class Ensemble:
    """Weighted model pool scored as ``(1/Q) * sum_q w_q F_q`` (kept verbatim;

    the leading 1/Q halves scores for the default two 0.5 weights but cannot
    change any rank)."""

    models: tuple[SurrogateModel, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.models) != len(self.weights):
            raise ValueError("one weight per model required")
        if any(w < 0 for w in self.weights):
            raise ValueError("ensemble weights must be nonnegative")
        dims = {m.dim for m in self.models}
        if len(dims) > 1:
            raise DimMismatch(f"ensemble members disagree on dim: {sorted(dims)}")


@dataclass(frozen=True)
class RankResult:
    """Per-user rank of the target plus the full candidate orderings."""

    target: str
    users: tuple[str, ...]
    ranks: tuple[int, ...]
    orderings: tuple[tuple[str, ...], ...]


def n_params(kind: ModelKind, dim: int, hidden: int = 0) -> int:
    if kind is ModelKind.MEANPOOL_LR:
        return dim + 1
    return dim * hidden + 2 * hidden + 1


def init_model(kind: ModelKind, dim: int, hidden: int = 0, seed: int = 0) -> SurrogateModel:
    """Deterministic small-scale initialization from the seed."""
    rng = np.random.default_rng(seed)
    if kind is ModelKind.MEANPOOL_LR:
        theta = np.concatenate([rng.standard_normal(dim) * 0.1, np.zeros(1)])
        hidden = 0
    else:
        w = rng.standard_normal((hidden, dim)) / np.sqrt(dim)
        v = rng.standard_normal(hidden) / np.sqrt(hidden)
        theta = np.concatenate([w.ravel(), np.zeros(hidden), v, np.zeros(1)])
    return SurrogateModel(kind=kind, theta=theta, dim=dim, hidden=hidden, seed=seed)


def _unpack_mlp(model: SurrogateModel):
    d, h = model.dim, model.hidden
    th = model.theta
    w = th[: h * d].reshape(h, d)
    a = th[h * d : h * d + h]
    v = th[h * d + h : h * d + 2 * h]
    b = th[-1]
    return w, a, v, b


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logits(model: SurrogateModel, X: np.ndarray) -> np.ndarray:
    """Pre-sigmoid scores for a batch of u*c feature rows."""
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.dim:
        raise DimMismatch(f"features have dim {X.shape[1]}, model wants {model.dim}")
    if model.kind is ModelKind.MEANPOOL_LR:
        return X @ model.theta[:-1] + model.theta[-1]
    w, a, v, b = _unpack_mlp(model)
    return np.tanh(X @ w.T + a) @ v + b


def predict(model: SurrogateModel, u: np.ndarray, c: np.ndarray) -> float:
    """Click probability for one (user vector, candidate vector) pair."""
    if u.shape != (model.dim,) or c.shape != (model.dim,):
        raise DimMismatch(f"expected vectors of dim {model.dim}")
    return float(_sigmoid(logits(model, u * c))[0])


def batch_scores(model: SurrogateModel, X: np.ndarray) -> np.ndarray:
    return _sigmoid(logits(model, X))


def ensemble_score(ens: Ensemble, u: np.ndarray, c: np.ndarray) -> float:
    """Exactly ``(1/Q) * sum_q w_q * F_q``."""
    q = len(ens.models)
    return sum(w * predict(m, u, c) for m, w in zip(ens.models, ens.weights)) / q


def ensemble_batch_scores(ens: Ensemble, X: np.ndarray) -> np.ndarray:
    q = len(ens.models)
    out = np.zeros(X.shape[0] if X.ndim == 2 else 1)
    for m, w in zip(ens.models, ens.weights):
        out = out + w * batch_scores(m, X)
    return out / q


# ---------------------------------------------------------------------------
# feature plumbing


def user_vector(table: EmbeddingTable, corpus: Corpus, history: ClickHistory) -> np.ndarray:
    """Mean of the news embeddings of the user's clicked news."""
    if not history.clicked:
        raise EmptyHistory(history.user)
    acc = np.zeros(table.dim)
    for nid in history.clicked:
        acc += news_embedding(table, corpus.articles[nid])
    return acc / len(history.clicked)


def news_matrix(table: EmbeddingTable, corpus: Corpus):
    """Embeddings for every article, with a stable id -> row index map."""
    ids = tuple(sorted(corpus.articles))
    index = {nid: i for i, nid in enumerate(ids)}
    mat = np.stack([news_embedding(table, corpus.articles[nid]) for nid in ids])
    return ids, index, mat


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def negative_samples(corpus: Corpus, history: ClickHistory, neg_k: int, seed: int) -> tuple[str, ...]:
    """``neg_k`` uniform non-clicked viewed news per click, frozen per (seed, user).

    Draws depend only on the seed, the user name and the (order-insensitive)
    clicked/viewed id sets, so perturbing titles never changes the samples.
    """
    pool = sorted(corpus.viewed - set(history.clicked))
    if not pool:
        return ()
    rng = np.random.default_rng([seed, _stable_hash(history.user)])
    idx = rng.integers(0, len(pool), size=neg_k * len(history.clicked))
    return tuple(pool[i] for i in idx)


def user_samples(corpus: Corpus, history: ClickHistory, neg_k: int, seed: int):
    """(news ids, 0/1 labels) for the user's BCE objective: clicks then negatives."""
    negs = negative_samples(corpus, history, neg_k, seed)
    ids = tuple(history.clicked) + negs
    labels = np.concatenate([np.ones(len(history.clicked)), np.zeros(len(negs))])
    return ids, labels


def _user_features(table, corpus, history, neg_k, seed):
    ids, labels = user_samples(corpus, history, neg_k, seed)
    uvec = user_vector(table, corpus, history)
    feats = np.stack([uvec * news_embedding(table, corpus.articles[nid]) for nid in ids])
    return feats, labels


# ---------------------------------------------------------------------------
# loss, gradient, Hessian


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    # softplus(z) - y*z, stable for large |z|
    return float(np.sum(np.logaddexp(0.0, z) - y * z))


def user_loss(
    model: SurrogateModel,
    corpus: Corpus,
    history: ClickHistory,
    table: EmbeddingTable,
    neg_k: int,
    seed: int,
) -> float:
    """Summed BCE over the user's clicked news (label 1) and frozen negatives (label 0)."""
    feats, labels = _user_features(table, corpus, history, neg_k, seed)
    return _bce_from_logits(logits(model, feats), labels)


def loss_grad_batch(model: SurrogateModel, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Analytic gradient of summed BCE w.r.t. theta for feature rows X."""
    if model.kind is ModelKind.MEANPOOL_LR:
        r = _sigmoid(X @ model.theta[:-1] + model.theta[-1]) - y
        return np.concatenate([X.T @ r, [r.sum()]])
    w, a, v, b = _unpack_mlp(model)
    hh = np.tanh(X @ w.T + a)  # (n, hidden)
    r = _sigmoid(hh @ v + b) - y
    d1 = 1.0 - hh * hh
    s = d1 * v  # (n, hidden): dz/d(pre-activation)
    gw = (s * r[:, None]).T @ X  # (hidden, dim)
    ga = s.T @ r
    gv = hh.T @ r
    return np.concatenate([gw.ravel(), ga, gv, [r.sum()]])


def user_loss_grad(
    model: SurrogateModel,
    corpus: Corpus,
    history: ClickHistory,
    table: EmbeddingTable,
    neg_k: int,
    seed: int,
) -> np.ndarray:
    feats, labels = _user_features(table, corpus, history, neg_k, seed)
    return loss_grad_batch(model, feats, labels)


def _logit_grad_batch(model: SurrogateModel, X: np.ndarray) -> np.ndarray:
    """Rows of dz/dtheta for each feature row: shared by Hessian and dF/dtheta."""
    n = X.shape[0]
    if model.kind is ModelKind.MEANPOOL_LR:
        return np.hstack([X, np.ones((n, 1))])
    w, a, v, b = _unpack_mlp(model)
    hh = np.tanh(X @ w.T + a)
    d1 = 1.0 - hh * hh
    s = d1 * v
    gw = s[:, :, None] * X[:, None, :]  # (n, hidden, dim)
    return np.hstack([gw.reshape(n, -1), s, hh, np.ones((n, 1))])


def prediction_grad(model: SurrogateModel, x: np.ndarray) -> np.ndarray:
    """dF/dtheta at one feature row x, F = sigmoid(z)."""
    p = batch_scores(model, x[None, :])[0]
    return p * (1.0 - p) * _logit_grad_batch(model, x[None, :])[0]


def prediction_grad_batch(model: SurrogateModel, X: np.ndarray) -> np.ndarray:
    """Rows of dF/dtheta for each feature row."""
    p = batch_scores(model, X)
    return (p * (1.0 - p))[:, None] * _logit_grad_batch(model, X)


def loss_hessian_batch(model: SurrogateModel, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact Hessian of summed BCE: Gauss term plus the logit curvature term."""
    z = logits(model, X)
    p = _sigmoid(z)
    w2 = p * (1.0 - p)
    gz = _logit_grad_batch(model, X)
    hess = gz.T @ (w2[:, None] * gz)
    if model.kind is ModelKind.TINY_MLP:
        # (p - y) * d2z/dtheta2; nonzero blocks follow the tanh layer structure
        w, a, v, b = _unpack_mlp(model)
        hh = np.tanh(X @ w.T + a)
        d1 = 1.0 - hh * hh
        q = -2.0 * v * hh * d1  # (n, hidden): d2z/dg2 diagonal
        r = p - y
        d, h = model.dim, model.hidden
        for k in range(h):
            wk = slice(k * d, (k + 1) * d)
            ak = h * d + k
            vk = h * d + h + k
            cq = r * q[:, k]
            cd = r * d1[:, k]
            blk = X.T @ (cq[:, None] * X)
            hess[wk, wk] += blk
            xa = cq @ X
            hess[wk, ak] += xa
            hess[ak, wk] += xa
            xv = cd @ X
            hess[wk, vk] += xv
            hess[vk, wk] += xv
            hess[ak, ak] += cq.sum()
            sav = cd.sum()
            hess[ak, vk] += sav
            hess[vk, ak] += sav
    return hess


def loss_hessian(
    model: SurrogateModel,
    corpus: Corpus,
    table: EmbeddingTable,
    neg_k: int,
    seed: int,
    damping: float = 1e-3,
    cap: int = 512,
) -> np.ndarray:
    """Hessian of the total objective: sum over all users, plus ``damping * I``."""
    if model.n_params > cap:
        raise HessianTooLarge(f"{model.n_params} parameters exceeds the explicit cap {cap}")
    hess = np.zeros((model.n_params, model.n_params))
    for hist in corpus.histories:
        if not hist.clicked:
            continue
        feats, labels = _user_features(table, corpus, hist, neg_k, seed)
        hess += loss_hessian_batch(model, feats, labels)
    return hess + damping * np.eye(model.n_params)


def loss_hvp_batch(model: SurrogateModel, X: np.ndarray, y: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product of summed BCE without materializing H."""
    if m.shape != (model.n_params,):
        raise DimMismatch(f"vector has shape {m.shape}, want ({model.n_params},)")
    z = logits(model, X)
    p = _sigmoid(z)
    w2 = p * (1.0 - p)
    if model.kind is ModelKind.MEANPOOL_LR:
        zm = X @ m[:-1] + m[-1]
        alpha = w2 * zm
        return np.concatenate([X.T @ alpha, [alpha.sum()]])
    w, a, v, b = _unpack_mlp(model)
    d, h = model.dim, model.hidden
    mw = m[: h * d].reshape(h, d)
    ma = m[h * d : h * d + h]
    mv = m[h * d + h : h * d + 2 * h]
    mb = m[-1]
    hh = np.tanh(X @ w.T + a)
    d1 = 1.0 - hh * hh
    s = d1 * v
    q = -2.0 * v * hh * d1
    t = X @ mw.T + ma  # (n, hidden): directional pre-activation shift
    zm = (s * t).sum(axis=1) + hh @ mv + mb
    alpha = w2 * zm
    r = p - y
    a1 = q * t + d1 * mv  # curvature term through the hidden layer
    hw = (s * alpha[:, None] + a1 * r[:, None]).T @ X
    ha = s.T @ alpha + a1.T @ r
    hv = hh.T @ alpha + (d1 * t).T @ r
    hb = alpha.sum()
    return np.concatenate([hw.ravel(), ha, hv, [hb]])


# ---------------------------------------------------------------------------
# training


def _adam_step(theta, grad, mom, vel, step, lr, b1=0.9, b2=0.999, eps=1e-8):
    mom = b1 * mom + (1 - b1) * grad
    vel = b2 * vel + (1 - b2) * grad * grad
    mhat = mom / (1 - b1**step)
    vhat = vel / (1 - b2**step)
    return theta - lr * mhat / (np.sqrt(vhat) + eps), mom, vel


def train(
    model: SurrogateModel,
    corpus: Corpus,
    table: EmbeddingTable,
    epochs: int,
    lr: float,
    seed: int,
    neg_k: int = 4,
    sample_seed: int = 0,
) -> SurrogateModel:
    """Fit theta by per-user ADAM steps, user order reshuffled each epoch.

    Deterministic in (seed, corpus): negative samples are frozen by
    ``sample_seed`` and the shuffle stream by ``seed``.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    users = [h for h in corpus.histories if h.clicked]
    feats = []
    for hist in users:
        X, y = _user_features(table, corpus, hist, neg_k, sample_seed)
        feats.append((X, y))
    rng = np.random.default_rng(seed)
    theta = model.theta.copy()
    mom = np.zeros_like(theta)
    vel = np.zeros_like(theta)
    step = 0
    for _ in range(epochs):
        for ui in rng.permutation(len(users)):
            X, y = feats[ui]
            work = replace(model, theta=theta)
            grad = loss_grad_batch(work, X, y)
            step += 1
            theta, mom, vel = _adam_step(theta, grad, mom, vel, step, lr)
        if not np.all(np.isfinite(theta)):
            raise DivergedLoss("parameters became non-finite during training")
    trained = replace(model, theta=theta)
    total = sum(_bce_from_logits(logits(trained, X), y) for X, y in feats)
    if not np.isfinite(total):
        raise DivergedLoss("final training loss is non-finite")
    return trained


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to (re)train one member deterministically."""

    kind: ModelKind
    dim: int
    hidden: int = 0
    seed: int = 0
    epochs: int = 60
    lr: float = 0.001


def train_from_spec(
    spec: ModelSpec,
    corpus: Corpus,
    table: EmbeddingTable,
    neg_k: int = 4,
    sample_seed: int = 0,
) -> SurrogateModel:
    model = init_model(spec.kind, spec.dim, spec.hidden, spec.seed)
    return train(model, corpus, table, spec.epochs, spec.lr, seed=spec.seed, neg_k=neg_k, sample_seed=sample_seed)


def train_ensemble(
    members: tuple[ModelSpec, ...],
    weights: tuple[float, ...],
    corpus: Corpus,
    table: EmbeddingTable,
    neg_k: int = 4,
    sample_seed: int = 0,
) -> Ensemble:
    models = tuple(train_from_spec(s, corpus, table, neg_k, sample_seed) for s in members)
    return Ensemble(models=models, weights=weights)


# ---------------------------------------------------------------------------
# ranking


def _score_matrix(scorer, user_vecs: np.ndarray, cand_vecs: np.ndarray) -> np.ndarray:
    """(users x candidates) score matrix for a model or ensemble."""
    m, k = user_vecs.shape[0], cand_vecs.shape[0]
    feats = (user_vecs[:, None, :] * cand_vecs[None, :, :]).reshape(m * k, -1)
    if isinstance(scorer, Ensemble):
        flat = ensemble_batch_scores(scorer, feats)
    else:
        flat = batch_scores(scorer, feats)
    return flat.reshape(m, k)


def rank_candidates(scorer, corpus: Corpus, table: EmbeddingTable) -> RankResult:
    """Rank every candidate for every user: descending score, ties by ascending id."""
    if not corpus.candidates:
        raise ValueError("corpus has no candidates")
    if corpus.target not in corpus.candidates:
        raise TargetNotInCandidates(corpus.target)
    cand_ids = sorted(corpus.candidates)
    cand_vecs = np.stack([news_embedding(table, corpus.articles[c]) for c in cand_ids])
    users, user_vecs = [], []
    for hist in corpus.histories:
        if hist.clicked:
            users.append(hist.user)
            user_vecs.append(user_vector(table, corpus, hist))
    scores = _score_matrix(scorer, np.stack(user_vecs), cand_vecs)
    t = cand_ids.index(corpus.target)
    ranks, orderings = [], []
    for row in scores:
        order = sorted(range(len(cand_ids)), key=lambda j: (-row[j], cand_ids[j]))
        orderings.append(tuple(cand_ids[j] for j in order))
        ranks.append(order.index(t) + 1)
    return RankResult(
        target=corpus.target,
        users=tuple(users),
        ranks=tuple(ranks),
        orderings=tuple(orderings),
    )


def target_ranks_from_scores(scores: np.ndarray, cand_ids: list[str], target: str) -> np.ndarray:
    """Vectorized target ranks from a score matrix, same tie rule as rank_candidates."""
    t = cand_ids.index(target)
    ts = scores[:, t][:, None]
    higher = scores > ts
    tie_before = (scores == ts) & np.array([cid < target for cid in cand_ids])[None, :]
    return 1 + higher.sum(axis=1) + tie_before.sum(axis=1)


def mrr(scorer, corpus: Corpus, table: EmbeddingTable, target: str | None = None) -> float:
    """Mean reciprocal rank of the target over all users with a history."""
    work = corpus if target is None or target == corpus.target else replace(corpus, target=target)
    result = rank_candidates(scorer, work, table)
    return float(np.mean([1.0 / k for k in result.ranks]))


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: SurrogateModel, path) -> None:
    """Header line (kind, dim, hidden, seed) + raw float64 parameter bytes."""
    header = json.dumps(
        {"kind": model.kind.value, "dim": model.dim, "hidden": model.hidden, "seed": model.seed}
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(model.theta, dtype="<f8").tobytes())


def load_model(path) -> SurrogateModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        theta = np.frombuffer(fh.read(), dtype="<f8").copy()
    return SurrogateModel(
        kind=ModelKind(header["kind"]),
        theta=theta,
        dim=header["dim"],
        hidden=header["hidden"],
        seed=header["seed"],
    )
