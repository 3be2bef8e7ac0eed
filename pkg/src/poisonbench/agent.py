"""MDP environment, learning agent and the None/Random/Effective baselines.

The agent encodes (target embedding, digest of perturbed news, remaining
budget fraction) through a gated recurrent cell, projects the hidden state to
the tree embedding dimension with a two-layer 256-unit rectified head, and
walks the two hierarchical trees comparing child scores.  Each chosen node's
score is treated as a Q estimate and regressed toward the discounted terminal
return (Monte-Carlo targets; the reward is purely terminal and horizons are
short, so bootstrapping machinery buys nothing).  Exploration is Boltzmann
over the child-score gap with the temperature annealed linearly; evaluation
is greedy.

All backprop here is hand-written numpy and checked against finite
differences in the tests.  Replay items store the step input and the previous
hidden state, so the recurrent cell trains through the most recent step only
(stored-state truncation).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .corpus import Corpus
from .embeddings import EmbeddingTable, news_embedding, word_vector
from .hiertree import (
    EffTree,
    NoValidPairs,
    build_content_tree,
    build_news_tree,
    content_pairs,
    sample_path,
)
from .influence import InfluenceConfig, InfluenceEstimator
from .recommender import DivergedLoss, Ensemble, _stable_hash
from .risk import (
    Perturbation,
    RiskLedger,
    RiskMode,
    charge,
    make_perturbation,
    news_effectiveness,
    word_effectiveness,
)

GRU_HIDDEN = 64
PROJ_WIDTH = 256


class Variant(enum.Enum):
    """Action-structure variants for the ablation study."""

    HS = "hs"
    NON_HS = "non_hs"
    RANDOM_HS = "random_hs"


@dataclass(frozen=True)
class AgentState:
    """Digest of perturbed news embeddings, remaining budget share, step index."""

    perturbed_digest: np.ndarray
    remaining_fraction: float
    step: int


@dataclass(frozen=True)
class EpisodeStep:
    """One action with everything needed to recompute its Q scores later."""

    x: np.ndarray | None
    h_prev: np.ndarray | None
    nodes: tuple[tuple[str, int], ...]
    scores: tuple[float, ...]
    perturbation: Perturbation


@dataclass(frozen=True)
class Episode:
    steps: tuple[EpisodeStep, ...]
    ledger: RiskLedger
    reward: float
    returns: tuple[float, ...]
    estimated_mrr: float

    @property
    def perturbations(self) -> tuple[Perturbation, ...]:
        return tuple(s.perturbation for s in self.steps)


class AttackEnv:
    """Clean corpus, trained offline ensemble and the reward machinery."""

    def __init__(
        self,
        corpus: Corpus,
        table: EmbeddingTable,
        ens: Ensemble,
        budget: float = 40.0,
        horizon: int = 30,
        gamma: float = 0.99,
        risk_mode: RiskMode = RiskMode.FULL,
        neg_k: int = 4,
        sample_seed: int = 0,
        influence_cfg: InfluenceConfig | None = None,
        reward_oracle=None,
    ):
        self.corpus = corpus
        self.table = table
        self.ens = ens
        self.budget = budget
        self.horizon = horizon
        self.gamma = gamma
        self.risk_mode = risk_mode
        self.neg_k = neg_k
        self.sample_seed = sample_seed
        self.estimator = InfluenceEstimator(
            ens, corpus, table, influence_cfg or InfluenceConfig(), neg_k, sample_seed
        )
        self.clean_mrr = self.estimator.clean_mrr
        self.target_emb = news_embedding(table, corpus.articles[corpus.target])
        self.reward_oracle = reward_oracle  # optional callable(corpus_after) -> true MRR

    def corpus_with_titles(self, titles: dict[str, tuple[str, ...]]) -> Corpus:
        if not titles:
            return self.corpus
        articles = dict(self.corpus.articles)
        for nid, title in titles.items():
            articles[nid] = replace(articles[nid], title=title)
        return replace(self.corpus, articles=articles)

    def reward(self, titles: dict[str, tuple[str, ...]]) -> tuple[float, float]:
        """(terminal reward, estimated post-attack MRR) for the cumulative edit."""
        if not titles:
            return 0.0, self.clean_mrr
        after = self.corpus_with_titles(titles)
        if self.reward_oracle is not None:
            estimated = self.reward_oracle(after)
        else:
            estimated = self.estimator.estimate(after).mrr_after
        return estimated - self.clean_mrr, estimated


# ---------------------------------------------------------------------------
# policy network


def _uniform(rng, shape, fan_in):
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Policy:
    """All trainable state: recurrent cell, projection head, tree embeddings.

    Tree embedding arrays are shared with the trees themselves, so the sampler
    always sees the current parameters.  Leaf rows are data and never updated.
    """

    def __init__(
        self,
        env: AttackEnv,
        seed: int,
        variant: Variant = Variant.HS,
        tree_seed: int = 0,
    ):
        self.env = env
        self.variant = variant
        self.tree_seed = tree_seed
        self.dim = env.table.dim
        self.in_dim = 2 * self.dim + 1
        rng = np.random.default_rng(seed)
        h, w, d = GRU_HIDDEN, PROJ_WIDTH, self.dim
        self.params: dict[str, np.ndarray] = {
            "gru_wx": _uniform(rng, (3 * h, self.in_dim), self.in_dim),
            "gru_wh": _uniform(rng, (3 * h, h), h),
            "gru_b": np.zeros(3 * h),
            "p_w1": _uniform(rng, (w, h), h),
            "p_b1": np.zeros(w),
            "p_w2": _uniform(rng, (w, w), w),
            "p_b2": np.zeros(w),
            "p_w3": _uniform(rng, (d, w), w),
            "p_b3": np.zeros(d),
        }
        self._adam = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in self.params.items()}
        self._adam_step = 0

        self.trees: dict[str, EffTree] = {}
        self._tree_adam: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._ema: dict[str, np.ndarray] = {k: v.copy() for k, v in self.params.items()}
        self._ema_trees: dict[str, np.ndarray] = {}
        self.flat_actions: list[tuple[str, tuple[str, str]]] = []
        self.flat_embs: np.ndarray | None = None
        random_order = variant is Variant.RANDOM_HS
        corpus, table = env.corpus, env.table
        if variant is Variant.NON_HS:
            embs = []
            target_art = corpus.articles[corpus.target]
            for nid in corpus.viewed_ids:
                art = corpus.articles[nid]
                n_emb = news_embedding(table, art)
                for pair in content_pairs(art, target_art):
                    pair_emb = 0.5 * (word_vector(table, pair[0]) + word_vector(table, pair[1]))
                    self.flat_actions.append((nid, pair))
                    embs.append(0.5 * (n_emb + pair_emb))
            self.flat_embs = np.stack(embs)
        else:
            tree = build_news_tree(corpus, table, corpus.target, tree_seed, random_order=random_order)
            self._register_tree("news", tree)

    # -- parameter bookkeeping ----------------------------------------------

    def _register_tree(self, key: str, tree: EffTree) -> None:
        self.trees[key] = tree
        self._tree_adam[key] = (np.zeros_like(tree.embeddings), np.zeros_like(tree.embeddings))
        self._ema_trees[key] = tree.embeddings.copy()

    def update_ema(self, decay: float) -> None:
        """Fold current parameters into the Polyak average (evaluation copy)."""
        for key, val in self.params.items():
            ema = self._ema[key]
            ema *= decay
            ema += (1.0 - decay) * val
        for key, tree in self.trees.items():
            ema = self._ema_trees[key]
            ema *= decay
            ema += (1.0 - decay) * tree.embeddings

    def swap_with_ema(self) -> None:
        """Exchange live and averaged parameters (call again to swap back).

        Greedy evaluation runs against the averaged policy, which smooths the
        checkpoint-to-checkpoint jitter of the live Q surface.
        """
        for key, val in self.params.items():
            tmp = val.copy()
            np.copyto(val, self._ema[key])
            np.copyto(self._ema[key], tmp)
        for key, tree in self.trees.items():
            tmp = tree.embeddings.copy()
            np.copyto(tree.embeddings, self._ema_trees[key])
            np.copyto(self._ema_trees[key], tmp)

    def content_tree(self, news_id: str) -> EffTree:
        key = f"content:{news_id}"
        tree = self.trees.get(key)
        if tree is None:
            tree = build_content_tree(
                self.env.corpus.articles[news_id],
                self.env.corpus.articles[self.env.corpus.target],
                self.env.table,
                seed=[self.tree_seed, _stable_hash(news_id)],
                random_order=self.variant is Variant.RANDOM_HS,
            )
            self._register_tree(key, tree)
        return tree

    def param_count(self) -> int:
        total = sum(v.size for v in self.params.values())
        for tree in self.trees.values():
            total += max(tree.n_leaves - 1, 0) * tree.dim
        return total

    def node_embedding(self, ref: tuple[str, int]) -> np.ndarray:
        key, idx = ref
        if key == "flat":
            return self.flat_embs[idx]
        return self.trees[key].embeddings[idx]

    # -- forward -------------------------------------------------------------

    def gru_step(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        h2, _ = self._gru_forward(x[None, :], h[None, :])
        return h2[0]

    def _gru_forward(self, x: np.ndarray, h: np.ndarray):
        nh = GRU_HIDDEN
        wx, wh, b = self.params["gru_wx"], self.params["gru_wh"], self.params["gru_b"]
        pre = x @ wx.T + b
        r = _sigmoid(pre[:, :nh] + h @ wh[:nh].T)
        z = _sigmoid(pre[:, nh : 2 * nh] + h @ wh[nh : 2 * nh].T)
        n = np.tanh(pre[:, 2 * nh :] + (r * h) @ wh[2 * nh :].T)
        h2 = (1.0 - z) * n + z * h
        return h2, (x, h, r, z, n)

    def project(self, h: np.ndarray) -> np.ndarray:
        v, _ = self._proj_forward(h[None, :])
        return v[0]

    def _proj_forward(self, h: np.ndarray):
        p = self.params
        pre1 = h @ p["p_w1"].T + p["p_b1"]
        y1 = np.maximum(pre1, 0.0)
        pre2 = y1 @ p["p_w2"].T + p["p_b2"]
        y2 = np.maximum(pre2, 0.0)
        out = y2 @ p["p_w3"].T + p["p_b3"]
        return out, (h, pre1, y1, pre2, y2)

    # -- action selection ------------------------------------------------------

    def _is_valid(self, working_titles, nid: str, pair: tuple[str, str]) -> bool:
        title = working_titles.get(nid, self.env.corpus.articles[nid].title)
        return pair[0] in title

    def _make(self, nid: str, pair: tuple[str, str]):
        return make_perturbation(
            self.env.corpus, self.env.table, nid, pair[0], pair[1], self.env.risk_mode
        )

    def _best_valid_leaf(self, working_titles, nid: str, ctree, v: np.ndarray):
        """Highest-scoring valid leaf of a content tree, or None if exhausted."""
        key = f"content:{nid}"
        leaves = ctree.leaves_in_visual_order()
        leaf_scores = np.array([v @ ctree.embeddings[i] for i in leaves])
        for j in np.argsort(-leaf_scores, kind="stable"):
            cand = ctree.leaf_payload[leaves[j]]
            if self._is_valid(working_titles, nid, cand):
                return cand, ((key, leaves[j]),), (float(leaf_scores[j]),)
        return None

    def _greedy_pair(self, working_titles, nid: str, v: np.ndarray):
        """Greedy walk on the content tree; masked best-leaf fallback if the
        walked action's word was already replaced out of the current title."""
        try:
            ctree = self.content_tree(nid)
        except NoValidPairs:
            return None
        key = f"content:{nid}"
        pair, visited, scores = sample_path(ctree, v, "greedy")
        if self._is_valid(working_titles, nid, pair):
            return pair, tuple((key, i) for i in visited), tuple(scores)
        return self._best_valid_leaf(working_titles, nid, ctree, v)

    def select_action(
        self,
        working_titles: dict[str, tuple[str, ...]],
        h: np.ndarray,
        mode: str,
        rng: np.random.Generator | None,
        temperature: float = 1.0,
    ):
        """One action draw.

        Consumed word pairs leave the valid action set: a draw that lands on
        one falls back to the highest-scoring valid leaf of the same content
        tree.  A news whose pair set is empty (NoValidPairs) or fully consumed
        is resampled once, then the episode terminates.  Greedy evaluation is
        the argmax over currently valid actions.

        Returns ``(perturbation, node refs, scores)`` or ``None`` to terminate.
        """
        v = self.project(h)
        if mode == "greedy":
            return self._select_greedy(working_titles, v)
        for _attempt in range(2):
            if self.variant is Variant.NON_HS:
                s = self.flat_embs @ v
                logits = s / temperature
                probs = np.exp(logits - logits.max())
                probs /= probs.sum()
                idx = int(rng.choice(len(s), p=probs))
                nid, pair = self.flat_actions[idx]
                if self._is_valid(working_titles, nid, pair):
                    return self._make(nid, pair), (("flat", idx),), (float(s[idx]),)
                continue
            nid, visited1, scores1 = sample_path(self.trees["news"], v, "boltzmann", rng, temperature)
            try:
                ctree = self.content_tree(nid)
            except NoValidPairs:
                continue
            pair, visited2, scores2 = sample_path(ctree, v, "boltzmann", rng, temperature)
            key = f"content:{nid}"
            if self._is_valid(working_titles, nid, pair):
                refs = tuple(("news", i) for i in visited1) + tuple((key, i) for i in visited2)
                return self._make(nid, pair), refs, tuple(scores1) + tuple(scores2)
            fallback = self._best_valid_leaf(working_titles, nid, ctree, v)
            if fallback is not None:
                pair, refs2, scores2 = fallback
                refs = tuple(("news", i) for i in visited1) + refs2
                return self._make(nid, pair), refs, tuple(scores1) + scores2
        return None

    def _select_greedy(self, working_titles, v: np.ndarray):
        if self.variant is Variant.NON_HS:
            s = self.flat_embs @ v
            for idx in np.argsort(-s, kind="stable"):
                nid, pair = self.flat_actions[idx]
                if self._is_valid(working_titles, nid, pair):
                    return self._make(nid, pair), (("flat", int(idx)),), (float(s[idx]),)
            return None
        tree = self.trees["news"]
        nid, visited1, scores1 = sample_path(tree, v, "greedy")
        choice = self._greedy_pair(working_titles, nid, v)
        if choice is not None:
            pair, refs2, scores2 = choice
            refs = tuple(("news", i) for i in visited1) + refs2
            return self._make(nid, pair), refs, tuple(scores1) + scores2
        leaves = tree.leaves_in_visual_order()
        leaf_scores = np.array([v @ tree.embeddings[i] for i in leaves])
        for j in np.argsort(-leaf_scores, kind="stable"):
            nid2 = tree.leaf_payload[leaves[j]]
            if nid2 == nid:
                continue
            choice = self._greedy_pair(working_titles, nid2, v)
            if choice is not None:
                pair, refs2, scores2 = choice
                refs = (("news", leaves[j]),) + refs2
                return self._make(nid2, pair), refs, (float(leaf_scores[j]),) + scores2
        return None

    # -- learning ---------------------------------------------------------------

    def replay_loss_and_grads(self, batch):
        """Forward + hand-written backward for a minibatch of replay items.

        Each item is ``(x, h_prev, node_ref, G)``.  Returns the scalar loss,
        the dense segment gradients, and per-tree sparse row gradients.
        """
        xs = np.stack([b[0] for b in batch])
        hs = np.stack([b[1] for b in batch])
        refs = [b[2] for b in batch]
        targets = np.array([b[3] for b in batch])
        embs = np.stack([self.node_embedding(r) for r in refs])

        h2, (x, h, r, z, n) = self._gru_forward(xs, hs)
        out, (hin, pre1, y1, pre2, y2) = self._proj_forward(h2)
        s = (out * embs).sum(axis=1)
        diff = s - targets
        loss = float(np.mean(diff * diff))

        bsz = len(batch)
        ds = 2.0 * diff / bsz
        dout = ds[:, None] * embs
        dembs = ds[:, None] * out

        p = self.params
        grads = {}
        grads["p_w3"] = dout.T @ y2
        grads["p_b3"] = dout.sum(axis=0)
        dy2 = (dout @ p["p_w3"]) * (pre2 > 0)
        grads["p_w2"] = dy2.T @ y1
        grads["p_b2"] = dy2.sum(axis=0)
        dy1 = (dy2 @ p["p_w2"]) * (pre1 > 0)
        grads["p_w1"] = dy1.T @ hin
        grads["p_b1"] = dy1.sum(axis=0)
        dh2 = dy1 @ p["p_w1"]

        nh = GRU_HIDDEN
        wh = p["gru_wh"]
        dz = dh2 * (h - n)
        dn = dh2 * (1.0 - z)
        dpre_n = dn * (1.0 - n * n)
        drh = dpre_n @ wh[2 * nh :]
        dr = drh * h
        dpre_r = dr * r * (1.0 - r)
        dpre_z = dz * z * (1.0 - z)
        dpre = np.hstack([dpre_r, dpre_z, dpre_n])
        grads["gru_wx"] = dpre.T @ x
        grads["gru_b"] = dpre.sum(axis=0)
        grads["gru_wh"] = np.vstack([dpre_r.T @ h, dpre_z.T @ h, dpre_n.T @ (r * h)])

        tree_grads: dict[str, dict[int, np.ndarray]] = {}
        for i, ref in enumerate(refs):
            key, idx = ref
            if key == "flat":
                continue  # flat action embeddings are data
            tree = self.trees[key]
            if tree.is_leaf(idx):
                continue  # leaf embeddings are data
            tree_grads.setdefault(key, {})
            if idx in tree_grads[key]:
                tree_grads[key][idx] = tree_grads[key][idx] + dembs[i]
            else:
                tree_grads[key][idx] = dembs[i]
        return loss, grads, tree_grads

    def update(self, batch, lr: float, b1=0.9, b2=0.999, eps=1e-8) -> float:
        loss, grads, tree_grads = self.replay_loss_and_grads(batch)
        if not np.isfinite(loss):
            raise DivergedLoss("replay loss became non-finite")
        self._adam_step += 1
        t = self._adam_step
        for key, g in grads.items():
            mom, vel = self._adam[key]
            mom *= b1
            mom += (1 - b1) * g
            vel *= b2
            vel += (1 - b2) * g * g
            mhat = mom / (1 - b1**t)
            vhat = vel / (1 - b2**t)
            self.params[key] -= lr * mhat / (np.sqrt(vhat) + eps)
        for key, rows in tree_grads.items():
            mom, vel = self._tree_adam[key]
            emb = self.trees[key].embeddings
            for idx, g in rows.items():
                mom[idx] = b1 * mom[idx] + (1 - b1) * g
                vel[idx] = b2 * vel[idx] + (1 - b2) * g * g
                mhat = mom[idx] / (1 - b1**t)
                vhat = vel[idx] / (1 - b2**t)
                emb[idx] -= lr * mhat / (np.sqrt(vhat) + eps)
        return loss


def encode_state(policy: Policy, target_embedding: np.ndarray, state: AgentState, h: np.ndarray) -> np.ndarray:
    """Advance the recurrent cell one step on [target ++ digest ++ budget share]."""
    x = np.concatenate([target_embedding, state.perturbed_digest, [state.remaining_fraction]])
    if x.shape != (policy.in_dim,):
        raise ValueError(f"state input has shape {x.shape}, policy wants ({policy.in_dim},)")
    return policy.gru_step(x, h)


# ---------------------------------------------------------------------------
# episodes


def _finish_episode(env: AttackEnv, steps, ledger) -> Episode:
    titles: dict[str, tuple[str, ...]] = {}
    for step in steps:
        p = step.perturbation
        title = titles.get(p.news, env.corpus.articles[p.news].title)
        pos = title.index(p.old_word)
        titles[p.news] = title[:pos] + (p.new_word,) + title[pos + 1 :]
    reward, estimated = env.reward(titles)
    length = len(steps)
    returns = tuple(env.gamma ** (length - 1 - t) * reward for t in range(length))
    return Episode(
        steps=tuple(steps),
        ledger=ledger,
        reward=reward,
        returns=returns,
        estimated_mrr=estimated,
    )


def run_episode(
    env: AttackEnv,
    policy: Policy,
    mode: str,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> Episode:
    """Roll the MDP forward for at most ``horizon`` steps under one policy."""
    ledger = RiskLedger(budget=env.budget)
    h = np.zeros(GRU_HIDDEN)
    steps: list[EpisodeStep] = []
    titles: dict[str, tuple[str, ...]] = {}
    digest_members: dict[str, np.ndarray] = {}
    for t in range(env.horizon):
        if digest_members:
            digest = np.mean([digest_members[k] for k in sorted(digest_members)], axis=0)
        else:
            digest = np.zeros(env.table.dim)
        frac = ledger.remaining / env.budget if env.budget > 0 else 0.0
        state = AgentState(perturbed_digest=digest, remaining_fraction=frac, step=t)
        x = np.concatenate([env.target_emb, state.perturbed_digest, [state.remaining_fraction]])
        h_prev = h.copy()
        h = policy.gru_step(x, h)
        choice = policy.select_action(titles, h, mode, rng, temperature)
        if choice is None:
            break
        p, refs, scores = choice
        new_ledger = charge(ledger, p)
        if new_ledger is None:
            break
        ledger = new_ledger
        title = titles.get(p.news, env.corpus.articles[p.news].title)
        pos = title.index(p.old_word)
        titles[p.news] = title[:pos] + (p.new_word,) + title[pos + 1 :]
        article = replace(env.corpus.articles[p.news], title=titles[p.news])
        digest_members[p.news] = news_embedding(env.table, article)
        steps.append(EpisodeStep(x=x, h_prev=h_prev, nodes=refs, scores=scores, perturbation=p))
    return _finish_episode(env, steps, ledger)


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling.

    Tracks running return statistics (Welford) over everything ever pushed:
    regression targets are standardized with them, otherwise the projection
    head can satisfy the squared error by collapsing its output norm onto the
    mean return, freezing node differentiation.  Greedy action choice is
    invariant to the affine rescaling, and standardized score gaps sit on the
    order-one scale the Boltzmann temperature schedule assumes.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: list = []
        self.pos = 0
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def push(self, item) -> None:
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            self.items[self.pos] = item
        self.pos = (self.pos + 1) % self.capacity
        g = item[3]
        self.count += 1
        delta = g - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (g - self.mean)

    @property
    def return_std(self) -> float:
        if self.count < 2:
            return 1.0
        return max(float(np.sqrt(self.m2 / self.count)), 1e-8)

    def standardize(self, g: float, scale: float = 1.0) -> float:
        return scale * (g - self.mean) / self.return_std

    def sample(self, k: int, rng: np.random.Generator):
        idx = rng.choice(len(self.items), size=k, replace=False)
        return [self.items[i] for i in idx]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class TrainResult:
    """Trained policy, the learning curve and the greedy episode per checkpoint."""

    policy: Policy
    curve: tuple[tuple[int, float], ...]
    eval_episodes: tuple[Episode, ...]


def train_agent(
    env: AttackEnv,
    episodes: int,
    lr: float,
    seed: int,
    variant: Variant = Variant.HS,
    tree_seed: int = 0,
    replay_capacity: int = 10_000,
    batch_size: int = 32,
    updates_per_episode: int = 4,
    eval_every: int = 50,
    tau_start: float = 1.0,
    tau_end: float = 0.1,
    target_scale: float = 2.0,
    ema_decay: float = 0.98,
) -> TrainResult:
    """Monte-Carlo Q training with Boltzmann exploration; greedy evaluation.

    ``target_scale`` multiplies the standardized regression targets, setting
    how sharp the annealed Boltzmann behavior is relative to the learned Q
    gaps.  Evaluation (every ``eval_every`` episodes, greedy) runs against a
    Polyak average of the policy with per-episode ``ema_decay``, which damps
    checkpoint jitter without touching the training path.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    master = np.random.default_rng(seed)
    policy = Policy(env, seed=int(master.integers(2**63)), variant=variant, tree_seed=tree_seed)
    behavior_rng = np.random.default_rng(int(master.integers(2**63)))
    replay_rng = np.random.default_rng(int(master.integers(2**63)))
    buffer = ReplayBuffer(replay_capacity)
    curve: list[tuple[int, float]] = []
    eval_episodes: list[Episode] = []
    for ep in range(1, episodes + 1):
        frac = (ep - 1) / max(episodes - 1, 1)
        tau = tau_start + (tau_end - tau_start) * frac
        episode = run_episode(env, policy, "boltzmann", behavior_rng, tau)
        for step, g in zip(episode.steps, episode.returns):
            for ref in step.nodes:
                buffer.push((step.x, step.h_prev, ref, g))
        for _ in range(updates_per_episode):
            if len(buffer) >= batch_size:
                batch = [
                    (x, h_prev, ref, buffer.standardize(g, target_scale))
                    for x, h_prev, ref, g in buffer.sample(batch_size, replay_rng)
                ]
                policy.update(batch, lr)
        policy.update_ema(ema_decay)
        if ep % eval_every == 0:
            policy.swap_with_ema()
            greedy = run_episode(env, policy, "greedy")
            policy.swap_with_ema()
            curve.append((ep, greedy.reward))
            eval_episodes.append(greedy)
    return TrainResult(policy=policy, curve=tuple(curve), eval_episodes=tuple(eval_episodes))


# ---------------------------------------------------------------------------
# baselines


def _baseline_episode(env: AttackEnv, choose) -> Episode:
    """Shared loop: ``choose(working titles)`` yields the next perturbation or None."""
    ledger = RiskLedger(budget=env.budget)
    steps: list[EpisodeStep] = []
    titles: dict[str, tuple[str, ...]] = {}
    for _t in range(env.horizon):
        p = choose(titles)
        if p is None:
            break
        new_ledger = charge(ledger, p)
        if new_ledger is None:
            break
        ledger = new_ledger
        title = titles.get(p.news, env.corpus.articles[p.news].title)
        pos = title.index(p.old_word)
        titles[p.news] = title[:pos] + (p.new_word,) + title[pos + 1 :]
        steps.append(EpisodeStep(x=None, h_prev=None, nodes=(), scores=(), perturbation=p))
    return _finish_episode(env, steps, ledger)


def baseline_none(env: AttackEnv) -> Episode:
    """No attack: the empty episode."""
    return _baseline_episode(env, lambda titles: None)


def baseline_random(env: AttackEnv, rng: np.random.Generator) -> Episode:
    """Uniform news and uniform valid word pair each step, one resample on misses."""
    corpus = env.corpus
    target_art = corpus.articles[corpus.target]
    pair_cache: dict[str, list[tuple[str, str]]] = {}

    def choose(titles):
        for _attempt in range(2):
            nid = corpus.viewed_ids[int(rng.integers(len(corpus.viewed_ids)))]
            pairs = pair_cache.get(nid)
            if pairs is None:
                pairs = content_pairs(corpus.articles[nid], target_art)
                pair_cache[nid] = pairs
            if not pairs:
                continue
            old_word, new_word = pairs[int(rng.integers(len(pairs)))]
            title = titles.get(nid, corpus.articles[nid].title)
            if old_word not in title:
                continue
            return make_perturbation(corpus, env.table, nid, old_word, new_word, env.risk_mode)
        return None

    return _baseline_episode(env, choose)


def baseline_effective(env: AttackEnv) -> Episode:
    """Greedy effectiveness order: best news, then its best unused pair.

    The action stream never repeats a (news, pair); actions whose word was
    already replaced out of the current title are skipped.
    """
    corpus, table = env.corpus, env.table
    target = corpus.target
    target_art = corpus.articles[target]
    news_order = sorted(
        corpus.viewed_ids,
        key=lambda nid: (-news_effectiveness(corpus, table, nid, target), nid),
    )
    stream: list[tuple[str, tuple[str, str]]] = []
    for nid in news_order:
        art = corpus.articles[nid]
        pairs = sorted(
            content_pairs(art, target_art),
            key=lambda pr: (-word_effectiveness(art, table, pr[0], pr[1]), pr),
        )
        stream.extend((nid, pr) for pr in pairs)
    pos = 0

    def choose(titles):
        nonlocal pos
        while pos < len(stream):
            nid, (old_word, new_word) = stream[pos]
            pos += 1
            title = titles.get(nid, corpus.articles[nid].title)
            if old_word in title:
                return make_perturbation(corpus, env.table, nid, old_word, new_word, env.risk_mode)
        return None

    return _baseline_episode(env, choose)
