"""Influence-function reward estimation and the retraining oracle.

Instead of retraining after every candidate perturbation, the estimated
parameter shift is the damped first-order step

    delta_theta = -(H + lambda I)^-1 g * epsilon_scale

where ``H`` is the loss Hessian summed over all users at the clean optimum,
``g`` is the total loss-gradient difference induced by the content edit
(summed over every user whose loss terms reference a changed news -- a
superset of the clicked-history set U' whenever a changed news also appears
among frozen negative samples, and equal to it otherwise), and
``epsilon_scale`` defaults to the per-user weight ``1/|U|``.

The propagated score change on the target is ``dF = grad_theta F . delta``;
estimated post-attack scores additionally account for the directly observable
feature shift (perturbed titles rescored at the clean parameters), then ranks
and MRR are recomputed without any retraining.  ``retrain_oracle`` provides
the ground truth all of this is validated against.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .corpus import Corpus, NotInViewedSet
from .embeddings import EmbeddingTable, news_embedding
from .recommender import (
    Ensemble,
    ModelSpec,
    SurrogateModel,
    batch_scores,
    loss_grad_batch,
    loss_hessian,
    loss_hvp_batch,
    mrr,
    prediction_grad_batch,
    target_ranks_from_scores,
    train_ensemble,
    user_samples,
    user_vector,
)


class CgStalled(RuntimeError):
    """Conjugate gradient stopped improving; carries the best iterate."""

    def __init__(self, message, best_x, best_residual, iterations):
        super().__init__(message)
        self.best_x = best_x
        self.best_residual = best_residual
        self.iterations = iterations


@dataclass(frozen=True)
class InfluenceConfig:
    """Solver and scaling knobs for the influence estimator.

    ``epsilon_scale=None`` resolves to ``1/|U|`` at use.  ``include_feature_shift``
    folds the directly observable embedding change of perturbed titles into the
    estimated scores (the parameter-influence term alone cannot see it).
    """

    damping: float = 1e-3
    cg_tolerance: float = 1e-6
    cg_max_iters: int = 500
    explicit_hessian_cap: int = 512
    epsilon_scale: float | None = None
    include_feature_shift: bool = True

    def __post_init__(self):
        if self.damping <= 0:
            raise ValueError("damping must be > 0")
        if self.cg_tolerance <= 0:
            raise ValueError("cg_tolerance must be > 0")


@dataclass(frozen=True)
class InfluenceReport:
    """Outcome of one estimate: parameter deltas, target score deltas, MRR shift."""

    mrr_before: float
    mrr_after: float
    param_deltas: tuple[np.ndarray, ...]
    score_deltas: np.ndarray
    affected: frozenset[str]
    residual: float
    damping: float
    wall_time: float = 0.0

    @property
    def mrr_delta(self) -> float:
        return self.mrr_after - self.mrr_before

    def to_record(self, perturbation_id: str) -> str:
        """One line for the validation CSVs: id, dMRR, residual, lambda, seconds."""
        return (
            f"{perturbation_id}\t{self.mrr_delta!r}\t{self.residual!r}"
            f"\t{self.damping!r}\t{self.wall_time:.6f}"
        )


def affected_users(corpus: Corpus, news_id: str) -> frozenset[str]:
    """U': users whose click history contains the news."""
    if news_id not in corpus.viewed:
        raise NotInViewedSet(news_id)
    return frozenset(h.user for h in corpus.histories if news_id in h.clicked)


def cg_solve(matvec, b: np.ndarray, tol: float, max_iters: int, stall_window: int = 25):
    """Conjugate gradient for ``A x = b`` given only the matvec.

    Returns ``(x, info)`` where ``info`` has the final residual norm, iteration
    count and a success flag (residual <= tol * |b|).  Raises
    :class:`CgStalled` if the best residual stops improving for
    ``stall_window`` iterations.
    """
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), {"residual": 0.0, "iterations": 0, "success": True}
    target = tol * b_norm
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    best_x, best_res, best_iter = x.copy(), np.sqrt(rr), 0
    for it in range(1, max_iters + 1):
        if np.sqrt(rr) <= target:
            break
        ap = matvec(p)
        alpha = rr / float(p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(r @ r)
        res = np.sqrt(rr_new)
        if res < best_res:
            best_x, best_res, best_iter = x.copy(), res, it
        elif it - best_iter >= stall_window:
            raise CgStalled(
                f"no residual improvement in {stall_window} iterations (best {best_res:.3e})",
                best_x=best_x,
                best_residual=best_res,
                iterations=it,
            )
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = float(np.linalg.norm(r))
    if res <= best_res:
        best_x, best_res = x, res
    return best_x, {
        "residual": best_res,
        "iterations": best_iter if best_res < res else it,
        "success": best_res <= target,
    }


def _all_features(corpus: Corpus, table: EmbeddingTable, neg_k: int, seed: int):
    """Stacked (features, labels) over every user's loss samples."""
    feats, labels = [], []
    for hist in corpus.histories:
        if not hist.clicked:
            continue
        ids, y = user_samples(corpus, hist, neg_k, seed)
        uvec = user_vector(table, corpus, hist)
        feats.append(np.stack([uvec * news_embedding(table, corpus.articles[nid]) for nid in ids]))
        labels.append(y)
    return np.vstack(feats), np.concatenate(labels)


def inverse_hvp(
    model: SurrogateModel,
    corpus: Corpus,
    table: EmbeddingTable,
    v: np.ndarray,
    cfg: InfluenceConfig,
    neg_k: int,
    seed: int,
):
    """Solve ``(H + damping I) x = v`` by CG with exact analytic HVPs.

    Returns ``(x, info)``; see :func:`cg_solve` for the info fields.
    """
    if v.shape != (model.n_params,):
        raise ValueError(f"vector has shape {v.shape}, model has {model.n_params} parameters")
    X, y = _all_features(corpus, table, neg_k, seed)

    def matvec(m):
        return loss_hvp_batch(model, X, y, m) + cfg.damping * m

    return cg_solve(matvec, v, tol=cfg.cg_tolerance, max_iters=cfg.cg_max_iters)


class InfluenceEstimator:
    """Precomputed fast path: one Hessian factorization per model, reused
    across every perturbation of the same clean corpus.

    ``estimate(corpus_after)`` never retrains; it recomputes embeddings of the
    changed news, the gradient difference of the users whose loss terms moved,
    solves the damped system, shifts the target scores and re-ranks.
    """

    def __init__(
        self,
        ens: Ensemble,
        corpus: Corpus,
        table: EmbeddingTable,
        cfg: InfluenceConfig,
        neg_k: int,
        sample_seed: int,
    ):
        self.ens = ens
        self.corpus = corpus
        self.table = table
        self.cfg = cfg
        self.neg_k = neg_k
        self.sample_seed = sample_seed

        ids = tuple(sorted(corpus.articles))
        self.index = {nid: i for i, nid in enumerate(ids)}
        self.E = np.stack([news_embedding(table, corpus.articles[nid]) for nid in ids])

        self.users = [h for h in corpus.histories if h.clicked]
        self.clicked_idx = [np.array([self.index[n] for n in h.clicked]) for h in self.users]
        self.sample_idx, self.sample_labels = [], []
        for hist in self.users:
            s_ids, labels = user_samples(corpus, hist, neg_k, sample_seed)
            self.sample_idx.append(np.array([self.index[n] for n in s_ids]))
            self.sample_labels.append(labels)
        self.U = np.stack([self.E[ci].mean(axis=0) for ci in self.clicked_idx])

        # per-news reverse maps: who clicked it / whose samples reference it
        self.clicked_by: dict[int, list[int]] = {}
        self.sampled_by: dict[int, list[int]] = {}
        for ui, ci in enumerate(self.clicked_idx):
            for n in set(ci.tolist()):
                self.clicked_by.setdefault(n, []).append(ui)
        for ui, si in enumerate(self.sample_idx):
            for n in set(si.tolist()):
                self.sampled_by.setdefault(n, []).append(ui)

        self.cand_ids = sorted(corpus.candidates)
        self.cand_idx = np.array([self.index[c] for c in self.cand_ids])
        self.t_col = self.cand_ids.index(corpus.target)
        self.clean_scores = self._score_matrix(self.U, self.E)
        self.clean_mrr = self._mrr_from_scores(self.clean_scores)

        self.eps_scale = cfg.epsilon_scale if cfg.epsilon_scale is not None else 1.0 / len(self.users)
        self.hessians: list[np.ndarray | None] = []
        self.hvp_data: list[tuple[np.ndarray, np.ndarray] | None] = []
        for model in ens.models:
            if model.n_params <= cfg.explicit_hessian_cap:
                self.hessians.append(
                    loss_hessian(model, corpus, table, neg_k, sample_seed, damping=cfg.damping)
                )
                self.hvp_data.append(None)
            else:
                X = np.vstack([self.U[ui][None, :] * self.E[si] for ui, si in enumerate(self.sample_idx)])
                y = np.concatenate(self.sample_labels)
                self.hessians.append(None)
                self.hvp_data.append((X, y))

    # -- internals ---------------------------------------------------------

    def _score_matrix(self, U: np.ndarray, E: np.ndarray) -> np.ndarray:
        C = E[self.cand_idx]
        feats = (U[:, None, :] * C[None, :, :]).reshape(len(self.users) * len(self.cand_ids), -1)
        out = np.zeros(feats.shape[0])
        q = len(self.ens.models)
        for model, w in zip(self.ens.models, self.ens.weights):
            out += w * batch_scores(model, feats)
        return (out / q).reshape(len(self.users), len(self.cand_ids))

    def _mrr_from_scores(self, scores: np.ndarray) -> float:
        ranks = target_ranks_from_scores(scores, self.cand_ids, self.corpus.target)
        return float(np.mean(1.0 / ranks))

    def _solve(self, model_i: int, g: np.ndarray):
        hess = self.hessians[model_i]
        if hess is not None:
            x = np.linalg.solve(hess, g)
            residual = float(np.linalg.norm(hess @ x - g))
            return x, residual
        X, y = self.hvp_data[model_i]
        model = self.ens.models[model_i]

        def matvec(m):
            return loss_hvp_batch(model, X, y, m) + self.cfg.damping * m

        x, info = cg_solve(matvec, g, tol=self.cfg.cg_tolerance, max_iters=self.cfg.cg_max_iters)
        return x, info["residual"]

    def _user_features(self, U, E, ui: int) -> np.ndarray:
        return U[ui][None, :] * E[self.sample_idx[ui]]

    # -- public ------------------------------------------------------------

    def estimate(self, corpus_after: Corpus) -> InfluenceReport:
        """Estimated post-attack MRR for a corpus differing only in titles."""
        start = time.perf_counter()
        changed = [
            nid
            for nid in self.corpus.viewed_ids
            if corpus_after.articles[nid].title != self.corpus.articles[nid].title
        ]
        n_models = len(self.ens.models)
        if not changed:
            zero = tuple(np.zeros(m.n_params) for m in self.ens.models)
            return InfluenceReport(
                mrr_before=self.clean_mrr,
                mrr_after=self.clean_mrr,
                param_deltas=zero,
                score_deltas=np.zeros(len(self.users)),
                affected=frozenset(),
                residual=0.0,
                damping=self.cfg.damping,
                wall_time=time.perf_counter() - start,
            )

        changed_idx = [self.index[nid] for nid in changed]
        E2 = self.E.copy()
        for nid, ni in zip(changed, changed_idx):
            E2[ni] = news_embedding(self.table, corpus_after.articles[nid])

        clicked_users = sorted({ui for ni in changed_idx for ui in self.clicked_by.get(ni, [])})
        grad_users = sorted(
            {ui for ni in changed_idx for ui in self.sampled_by.get(ni, [])} | set(clicked_users)
        )
        U2 = self.U.copy()
        for ui in clicked_users:
            U2[ui] = E2[self.clicked_idx[ui]].mean(axis=0)

        # one stacked gradient call per (before, after) per model
        x_before = np.vstack([self._user_features(self.U, self.E, ui) for ui in grad_users])
        x_after = np.vstack([self._user_features(U2, E2, ui) for ui in grad_users])
        y_stack = np.concatenate([self.sample_labels[ui] for ui in grad_users])
        deltas, residual = [], 0.0
        for mi, model in enumerate(self.ens.models):
            g = loss_grad_batch(model, x_after, y_stack) - loss_grad_batch(model, x_before, y_stack)
            x, res = self._solve(mi, g)
            deltas.append(-x * self.eps_scale)
            residual = max(residual, res)

        if self.cfg.include_feature_shift:
            scores = self.clean_scores.copy()
            moved_cols = [j for j, ni in enumerate(self.cand_idx) if ni in set(changed_idx)]
            if moved_cols:
                scores = self._score_matrix(U2, E2)
            elif clicked_users:
                C = E2[self.cand_idx]
                sub = (U2[clicked_users][:, None, :] * C[None, :, :]).reshape(-1, self.E.shape[1])
                out = np.zeros(sub.shape[0])
                for model, w in zip(self.ens.models, self.ens.weights):
                    out += w * batch_scores(model, sub)
                scores[clicked_users] = (out / n_models).reshape(len(clicked_users), len(self.cand_ids))
            feat_U, feat_E = U2, E2
        else:
            scores = self.clean_scores.copy()
            feat_U, feat_E = self.U, self.E

        # parameter influence propagated to the target probability of every user
        t_emb = feat_E[self.cand_idx[self.t_col]]
        x_target = feat_U * t_emb
        score_deltas = np.zeros(len(self.users))
        for mi, (model, w) in enumerate(zip(self.ens.models, self.ens.weights)):
            score_deltas += (w / n_models) * (prediction_grad_batch(model, x_target) @ deltas[mi])
        scores[:, self.t_col] += score_deltas

        report = InfluenceReport(
            mrr_before=self.clean_mrr,
            mrr_after=self._mrr_from_scores(scores),
            param_deltas=tuple(deltas),
            score_deltas=score_deltas,
            affected=frozenset(self.users[ui].user for ui in clicked_users),
            residual=residual,
            damping=self.cfg.damping,
        )
        return replace(report, wall_time=time.perf_counter() - start)


def param_influence(
    model: SurrogateModel,
    corpus_before: Corpus,
    corpus_after: Corpus,
    news_id: str,
    cfg: InfluenceConfig,
    table: EmbeddingTable,
    neg_k: int,
    seed: int,
) -> np.ndarray:
    """First-order parameter shift for edits confined to one news' title."""
    if news_id not in corpus_before.viewed:
        raise NotInViewedSet(news_id)
    for nid, art in corpus_before.articles.items():
        if nid != news_id and corpus_after.articles[nid].title != art.title:
            raise ValueError(f"corpora differ at {nid}, expected only {news_id}")
    g = np.zeros(model.n_params)
    for hist in corpus_before.histories:
        if not hist.clicked:
            continue
        ids, y = user_samples(corpus_before, hist, neg_k, seed)
        if news_id not in ids and news_id not in hist.clicked:
            continue
        u1 = user_vector(table, corpus_before, hist)
        u2 = user_vector(table, corpus_after, hist)
        x1 = np.stack([u1 * news_embedding(table, corpus_before.articles[n]) for n in ids])
        x2 = np.stack([u2 * news_embedding(table, corpus_after.articles[n]) for n in ids])
        g += loss_grad_batch(model, x2, y) - loss_grad_batch(model, x1, y)
    x, _info = inverse_hvp(model, corpus_before, table, g, cfg, neg_k, seed)
    eps = cfg.epsilon_scale if cfg.epsilon_scale is not None else 1.0 / sum(
        1 for h in corpus_before.histories if h.clicked
    )
    return -x * eps


def prediction_influence(
    ens: Ensemble,
    corpus_before: Corpus,
    corpus_after: Corpus,
    target: str,
    cfg: InfluenceConfig,
    table: EmbeddingTable,
    neg_k: int,
    seed: int,
    estimator: InfluenceEstimator | None = None,
) -> InfluenceReport:
    """Full estimated MRR shift; builds a transient estimator unless given one."""
    if estimator is None:
        base = corpus_before if corpus_before.target == target else replace(corpus_before, target=target)
        estimator = InfluenceEstimator(ens, base, table, cfg, neg_k, seed)
    after = corpus_after if corpus_after.target == target else replace(corpus_after, target=target)
    return estimator.estimate(after)


def retrain_oracle(
    members: tuple[ModelSpec, ...],
    weights: tuple[float, ...],
    corpus_after: Corpus,
    table: EmbeddingTable,
    neg_k: int,
    sample_seed: int,
) -> float:
    """Ground truth: retrain every member on the perturbed corpus, return true MRR."""
    ens = train_ensemble(members, weights, corpus_after, table, neg_k, sample_seed)
    return mrr(ens, corpus_after, table)
