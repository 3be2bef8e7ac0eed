"""Experiment runner behind the ``poisonbench`` CLI.

Configuration is a plain-text ``key=value`` file; any key can be overridden
by a command-line flag of the same name.  Commands write CSV + markdown
tables (full-precision floats, byte-reproducible from (config, seeds)) plus
PNG figures rendered from the same data.  Wall-clock measurements go to
``*_timings.csv`` sidecars, which are the only non-reproducible artifacts.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from . import agent as agent_mod
from .agent import AttackEnv, Variant, baseline_effective, baseline_none, baseline_random, train_agent
from .corpus import Corpus, apply_perturbation, load_corpus, synth_corpus, synth_vocab_vectors, write_corpus
from .embeddings import EmbeddingTable, load_embeddings, save_embeddings, word_distance
from .hiertree import content_pairs
from .influence import InfluenceConfig, InfluenceEstimator
from .recommender import (
    Ensemble,
    ModelKind,
    ModelSpec,
    _stable_hash,
    load_model,
    mrr,
    save_model,
    train_from_spec,
)
from .reporting import (
    bar_figure,
    curves_figure,
    heatmap_figure,
    read_csv,
    save_figure,
    write_csv,
    write_markdown_table,
)
from .risk import RiskMode, load_sequence, save_sequence, sequence_risk

log = logging.getLogger("poisonbench")

METHODS = ("none", "random", "effective", "tdp-cp")


class ConfigError(ValueError):
    """Bad key, bad value or missing artifact in the experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs, with defaults matching the reference hyper-parameters
    (budget 40, horizon 30, gamma 0.99, lr 0.001, 2000 episodes)."""

    # corpus
    corpus_source: str = "synth"
    news_path: str = ""
    behaviors_path: str = ""
    synth_seed: int = 7
    users: int = 200
    news: int = 500
    candidates: int = 50
    title_len: int = 8
    vocab: int = 400
    # embeddings
    embedding_source: str = "hashed"
    embedding_path: str = ""
    dim: int = 16
    # models
    offline_models: str = "meanpool_lr:0:11,tiny_mlp:8:12"
    online_model: str = "tiny_mlp:12:13"
    weights: str = "0.5,0.5"
    epochs: int = 40
    neg_k: int = 4
    sample_seed: int = 29
    # attack
    budget: float = 40.0
    horizon: int = 30
    gamma: float = 0.99
    lr: float = 0.001
    episodes: int = 2000
    risk_mode: str = "full"
    method: str = "tdp-cp"
    targets: str = "auto:20"
    agent_seed: int = 101
    tree_seed: int = 5
    updates_per_episode: int = 4
    eval_every: int = 50
    # influence
    damping: float = 1e-3
    cg_tolerance: float = 1e-6
    cg_max_iters: int = 500
    hessian_cap: int = 512
    include_feature_shift: bool = True
    # sweep / ablation
    sweep_budgets: str = "5,10,20,40"
    sweep_horizons: str = "0,5,15,30"
    sweep_method: str = "effective"
    ablate_target: str = ""
    ablate_budget: float = 15.0
    ablate_episodes: int = 0  # 0 -> use `episodes`
    match_fraction: float = 0.8
    # execution
    outdir: str = "runs/out"
    jobs: int = 1


_BOOLEANS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(name: str, raw: str, typ):
    try:
        if typ is bool:
            return _BOOLEANS[raw.strip().lower()]
        return typ(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_config(path: str | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read key=value lines ('#' comments allowed), then apply overrides."""
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    typemap = {"int": int, "float": float, "str": str, "bool": bool}
    values: dict[str, object] = {}

    def absorb(key: str, raw: str, where: str):
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} ({where})")
        typ = typemap.get(known[key], str) if isinstance(known[key], str) else known[key]
        values[key] = _coerce(key, raw, typ)

    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, raw = line.split("=", 1)
                absorb(key.strip(), raw.strip(), f"{path}:{lineno}")
    for key, raw in (overrides or {}).items():
        absorb(key, raw, "command line")
    cfg = ExperimentConfig(**values)
    if cfg.risk_mode not in {m.value for m in RiskMode}:
        raise ConfigError(f"risk_mode must be one of {[m.value for m in RiskMode]}")
    if cfg.method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    if cfg.corpus_source not in ("synth", "files"):
        raise ConfigError("corpus_source must be 'synth' or 'files'")
    return cfg


# ---------------------------------------------------------------------------
# config-driven construction


def _parse_model_spec(text: str, cfg: ExperimentConfig) -> ModelSpec:
    try:
        kind, hidden, seed = text.strip().split(":")
        return ModelSpec(
            kind=ModelKind(kind),
            dim=cfg.dim,
            hidden=int(hidden),
            seed=int(seed),
            epochs=cfg.epochs,
            lr=cfg.lr,
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad model spec {text!r}, want kind:hidden:seed") from exc


def offline_specs(cfg: ExperimentConfig) -> tuple[tuple[ModelSpec, ...], tuple[float, ...]]:
    members = tuple(_parse_model_spec(s, cfg) for s in cfg.offline_models.split(","))
    weights = tuple(float(w) for w in cfg.weights.split(","))
    if len(members) != len(weights):
        raise ConfigError("offline_models and weights must have the same length")
    return members, weights


def online_spec(cfg: ExperimentConfig) -> ModelSpec:
    return _parse_model_spec(cfg.online_model, cfg)


def build_table(cfg: ExperimentConfig) -> EmbeddingTable:
    if cfg.embedding_source == "file":
        path = cfg.embedding_path or os.path.join(cfg.outdir, "corpus", "embeddings.txt")
        if not os.path.exists(path):
            raise ConfigError(f"embedding file not found: {path} (run `poisonbench synth`?)")
        return load_embeddings(path, cfg.dim)
    if cfg.embedding_source != "hashed":
        raise ConfigError("embedding_source must be 'hashed' or 'file'")
    return EmbeddingTable(dim=cfg.dim)


def corpus_paths(cfg: ExperimentConfig) -> tuple[str, str]:
    if cfg.corpus_source == "files":
        if not cfg.news_path or not cfg.behaviors_path:
            raise ConfigError("corpus_source=files needs news_path and behaviors_path")
        return cfg.news_path, cfg.behaviors_path
    return os.path.join(cfg.outdir, "corpus", "news.tsv"), os.path.join(cfg.outdir, "corpus", "behaviors.tsv")


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    """Load the corpus the pipeline runs on (synth output must exist already)."""
    news_path, behaviors_path = corpus_paths(cfg)
    if not os.path.exists(news_path) or not os.path.exists(behaviors_path):
        if cfg.corpus_source == "files":
            raise ConfigError(f"missing corpus files: {news_path}, {behaviors_path}")
        raise ConfigError("synthetic corpus not found; run `poisonbench synth` first")
    corpus = load_corpus(news_path, behaviors_path, target=_default_target(news_path))
    return corpus


def _default_target(news_path: str) -> str:
    # the first candidate id in sorted order; candidates are impression-only news
    with open(news_path, "r", encoding="utf-8") as fh:
        ids = [ln.split("\t", 1)[0] for ln in fh if ln.strip()]
    cands = sorted(i for i in ids if i.startswith("C"))
    return cands[0] if cands else ids[0]


def target_list(cfg: ExperimentConfig, corpus: Corpus) -> list[str]:
    spec = cfg.targets.strip()
    cands = sorted(corpus.candidates)
    if spec.startswith("auto:"):
        n = int(spec.split(":", 1)[1])
        if n > len(cands):
            raise ConfigError(f"targets=auto:{n} but only {len(cands)} candidates exist")
        return cands[:n]
    chosen = [t.strip() for t in spec.split(",") if t.strip()]
    for t in chosen:
        if t not in corpus.candidates:
            raise ConfigError(f"target {t!r} is not a candidate")
    return chosen


def split_label(i: int, n: int) -> str:
    """7:1.5:1.5 grouping by position, recorded for reporting only."""
    n_train = round(0.7 * n)
    n_val = round(0.15 * n)
    if i < n_train:
        return "train"
    if i < n_train + n_val:
        return "val"
    return "test"


def influence_config(cfg: ExperimentConfig) -> InfluenceConfig:
    return InfluenceConfig(
        damping=cfg.damping,
        cg_tolerance=cfg.cg_tolerance,
        cg_max_iters=cfg.cg_max_iters,
        explicit_hessian_cap=cfg.hessian_cap,
        include_feature_shift=cfg.include_feature_shift,
    )


def _with_target(corpus: Corpus, target: str) -> Corpus:
    return corpus if corpus.target == target else replace(corpus, target=target)


def _model_paths(cfg: ExperimentConfig) -> tuple[list[str], str]:
    members, _ = offline_specs(cfg)
    mdir = os.path.join(cfg.outdir, "models")
    return [os.path.join(mdir, f"offline_{i}.ckpt") for i in range(len(members))], os.path.join(
        mdir, "online.ckpt"
    )


def load_trained(cfg: ExperimentConfig):
    """(offline ensemble, online model) from checkpoints written by cmd_train."""
    offline_paths, online_path = _model_paths(cfg)
    if not all(os.path.exists(p) for p in offline_paths) or not os.path.exists(online_path):
        raise ConfigError("model checkpoints not found; run `poisonbench train` first")
    _, weights = offline_specs(cfg)
    ens = Ensemble(models=tuple(load_model(p) for p in offline_paths), weights=weights)
    return ens, load_model(online_path)


def _target_seed(cfg: ExperimentConfig, target: str, salt: str = "") -> int:
    return int(np.random.default_rng([cfg.agent_seed, _stable_hash(target + salt)]).integers(2**63))


def _build_env(cfg: ExperimentConfig, corpus_t: Corpus, table, ens, estimator=None, **kw) -> AttackEnv:
    env = AttackEnv(
        corpus_t,
        table,
        ens,
        budget=kw.get("budget", cfg.budget),
        horizon=kw.get("horizon", cfg.horizon),
        gamma=cfg.gamma,
        risk_mode=RiskMode(kw.get("risk_mode", cfg.risk_mode)),
        neg_k=cfg.neg_k,
        sample_seed=cfg.sample_seed,
        influence_cfg=influence_config(cfg),
    )
    if estimator is not None:
        env.estimator = estimator
        env.clean_mrr = estimator.clean_mrr
    return env


def run_method(cfg: ExperimentConfig, env: AttackEnv, method: str, target: str):
    """One attack episode (or a full agent training) for a method; returns
    (episode, curve or None)."""
    if method == "none":
        return baseline_none(env), None
    if method == "random":
        rng = np.random.default_rng(_target_seed(cfg, target, "random"))
        return baseline_random(env, rng), None
    if method == "effective":
        return baseline_effective(env), None
    if method == "tdp-cp":
        result = train_agent(
            env,
            episodes=cfg.episodes,
            lr=cfg.lr,
            seed=_target_seed(cfg, target, "agent"),
            tree_seed=cfg.tree_seed,
            updates_per_episode=cfg.updates_per_episode,
            eval_every=cfg.eval_every,
        )
        final = agent_mod.run_episode(env, result.policy, "greedy")
        return final, result.curve
    raise ConfigError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: ExperimentConfig) -> None:
    if cfg.corpus_source != "synth":
        raise ConfigError("cmd synth only applies to corpus_source=synth")
    corpus = synth_corpus(
        seed=cfg.synth_seed,
        n_users=cfg.users,
        n_news=cfg.news,
        n_candidates=cfg.candidates,
        title_len=cfg.title_len,
        vocab_size=cfg.vocab,
    )
    news_path, behaviors_path = corpus_paths(cfg)
    os.makedirs(os.path.dirname(news_path), exist_ok=True)
    write_corpus(corpus, news_path, behaviors_path)
    if cfg.embedding_source == "file" and not cfg.embedding_path:
        vectors = synth_vocab_vectors(cfg.synth_seed, cfg.vocab, cfg.title_len, cfg.dim)
        save_embeddings(vectors, os.path.join(cfg.outdir, "corpus", "embeddings.txt"))
    log.info("synth corpus: %d users, %d news, %d candidates -> %s", cfg.users, cfg.news, cfg.candidates, news_path)


def cmd_train(cfg: ExperimentConfig) -> None:
    corpus = build_corpus(cfg)
    table = build_table(cfg)
    members, weights = offline_specs(cfg)
    offline_paths, online_path = _model_paths(cfg)
    os.makedirs(os.path.dirname(online_path), exist_ok=True)
    models = []
    for spec, path in zip(members, offline_paths):
        model = train_from_spec(spec, corpus, table, cfg.neg_k, cfg.sample_seed)
        save_model(model, path)
        models.append(model)
    online = train_from_spec(online_spec(cfg), corpus, table, cfg.neg_k, cfg.sample_seed)
    save_model(online, online_path)
    ens = Ensemble(models=tuple(models), weights=weights)

    targets = target_list(cfg, corpus)
    rows = []
    for i, t in enumerate(targets):
        corpus_t = _with_target(corpus, t)
        rows.append(
            (t, split_label(i, len(targets)), mrr(ens, corpus_t, table), mrr(online, corpus_t, table))
        )
    out = os.path.join(cfg.outdir, "models", "clean_mrr.csv")
    write_csv(out, ["target", "split", "offline_mrr", "online_mrr"], rows)
    fig = bar_figure(
        [r[0] for r in rows],
        {"offline": [r[2] for r in rows], "online": [r[3] for r in rows]},
        ylabel="clean MRR",
        title="Clean target MRR per system",
    )
    save_figure(fig, os.path.join(cfg.outdir, "models", "clean_mrr.png"))
    log.info("trained %d offline members + online model; clean MRR written to %s", len(models), out)


def _attack_one(cfg: ExperimentConfig, method: str, target: str):
    corpus = build_corpus(cfg)
    table = build_table(cfg)
    ens, _ = load_trained(cfg)
    corpus_t = _with_target(corpus, target)
    env = _build_env(cfg, corpus_t, table, ens)
    episode, curve = run_method(cfg, env, method, target)
    mdir = os.path.join(cfg.outdir, "attacks", method)
    os.makedirs(mdir, exist_ok=True)
    save_sequence(episode.perturbations, os.path.join(mdir, f"{target}.tsv"))
    if curve is not None:
        write_csv(
            os.path.join(mdir, f"{target}_curve.csv"),
            ["episode", "mrr_gain"],
            [(ep, gain) for ep, gain in curve],
        )
    return (
        target,
        method,
        len(episode.perturbations),
        episode.ledger.spent,
        episode.reward,
        curve,
    )


def cmd_attack(cfg: ExperimentConfig) -> None:
    corpus = build_corpus(cfg)
    targets = target_list(cfg, corpus)
    method = cfg.method
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_attack_one, [cfg] * len(targets), [method] * len(targets), targets))
    else:
        results = [_attack_one(cfg, method, t) for t in targets]
    results.sort(key=lambda r: r[0])
    rows = [
        (t, split_label(targets.index(t), len(targets)), n, spent, est_gain)
        for t, _m, n, spent, est_gain, _c in results
    ]
    mdir = os.path.join(cfg.outdir, "attacks", method)
    write_csv(
        os.path.join(mdir, "summary.csv"),
        ["target", "split", "n_perturbations", "risk_spent", "estimated_gain"],
        rows,
    )
    curves = {t: c for t, _m, _n, _s, _g, c in results if c is not None}
    if curves:
        fig = curves_figure(
            {t: ([p[0] for p in c], [p[1] for p in c]) for t, c in sorted(curves.items())},
            ylabel="estimated MRR gain",
            title=f"Learning curves ({method})",
        )
        save_figure(fig, os.path.join(mdir, "learning_curves.png"))
    log.info("attack %s: %d targets -> %s", method, len(targets), mdir)


def _eval_one(cfg: ExperimentConfig, target: str):
    corpus = build_corpus(cfg)
    table = build_table(cfg)
    members, weights = offline_specs(cfg)
    ens, online = load_trained(cfg)
    corpus_t = _with_target(corpus, target)
    estimator = InfluenceEstimator(ens, corpus_t, table, influence_config(cfg), cfg.neg_k, cfg.sample_seed)
    clean_offline = estimator.clean_mrr
    clean_online = mrr(online, corpus_t, table)
    ospec = online_spec(cfg)

    rows, timing_rows = [], []
    for method in METHODS:
        seq_path = os.path.join(cfg.outdir, "attacks", method, f"{target}.tsv")
        if not os.path.exists(seq_path):
            raise ConfigError(f"missing attack sequence {seq_path}; run `poisonbench attack --method {method}`")
        seq = load_sequence(seq_path)
        perturbed = corpus_t
        for p in seq:
            perturbed = apply_perturbation(perturbed, p)

        t0 = time.perf_counter()
        report = estimator.estimate(perturbed)
        est_seconds = time.perf_counter() - t0

        t0 = time.perf_counter()
        retrained = tuple(train_from_spec(s, perturbed, table, cfg.neg_k, cfg.sample_seed) for s in members)
        offline_mrr = mrr(Ensemble(models=retrained, weights=weights), perturbed, table)
        retrain_seconds = time.perf_counter() - t0

        online_mrr = mrr(train_from_spec(ospec, perturbed, table, cfg.neg_k, cfg.sample_seed), perturbed, table)
        rows.append(
            (
                method,
                target,
                len(seq),
                sequence_risk(corpus_t, table, seq, RiskMode(cfg.risk_mode)),
                clean_offline,
                clean_online,
                offline_mrr,
                online_mrr,
                report.mrr_after,
                offline_mrr - clean_offline,
                online_mrr - clean_online,
                report.mrr_after - clean_offline,
            )
        )
        timing_rows.append((method, target, est_seconds, retrain_seconds))
    return rows, timing_rows


def cmd_eval(cfg: ExperimentConfig) -> None:
    corpus = build_corpus(cfg)
    targets = target_list(cfg, corpus)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            chunks = list(pool.map(_eval_one, [cfg] * len(targets), targets))
    else:
        chunks = [_eval_one(cfg, t) for t in targets]
    all_rows = [row for rows, _ in chunks for row in rows]
    all_timings = [row for _, timings in chunks for row in timings]
    all_rows.sort(key=lambda r: (METHODS.index(r[0]), r[1]))
    all_timings.sort(key=lambda r: (METHODS.index(r[0]), r[1]))

    header = [
        "method",
        "target",
        "n_perturbations",
        "risk_spent",
        "clean_offline_mrr",
        "clean_online_mrr",
        "offline_mrr",
        "online_mrr",
        "estimated_mrr",
        "offline_gain",
        "online_gain",
        "estimated_gain",
    ]
    edir = os.path.join(cfg.outdir, "eval")
    write_csv(os.path.join(edir, "results.csv"), header, all_rows)
    write_csv(
        os.path.join(edir, "eval_timings.csv"),
        ["method", "target", "estimate_seconds", "retrain_seconds"],
        all_timings,
    )

    # mean +/- population std per method, over targets
    table_rows = []
    for method in METHODS:
        sub = [r for r in all_rows if r[0] == method]
        off = np.array([r[6] for r in sub])
        onl = np.array([r[7] for r in sub])
        table_rows.append(
            (
                method,
                f"{off.mean():.4f}±{off.std():.4f}",
                f"{onl.mean():.4f}±{onl.std():.4f}",
                float(np.mean([r[9] for r in sub])),
                float(np.mean([r[10] for r in sub])),
            )
        )
    write_markdown_table(
        os.path.join(edir, "result_table.md"),
        ["method", "offline MRR", "online MRR", "offline gain", "online gain"],
        table_rows,
    )
    write_csv(
        os.path.join(edir, "result_table.csv"),
        ["method", "offline_mrr_mean", "offline_mrr_std", "online_mrr_mean", "online_mrr_std"],
        [
            (
                m,
                float(np.mean([r[6] for r in all_rows if r[0] == m])),
                float(np.std([r[6] for r in all_rows if r[0] == m])),
                float(np.mean([r[7] for r in all_rows if r[0] == m])),
                float(np.std([r[7] for r in all_rows if r[0] == m])),
            )
            for m in METHODS
        ],
    )
    fig = bar_figure(
        list(METHODS),
        {
            "offline": [float(np.mean([r[6] for r in all_rows if r[0] == m])) for m in METHODS],
            "online": [float(np.mean([r[7] for r in all_rows if r[0] == m])) for m in METHODS],
        },
        ylabel="mean MRR after attack",
        title="Attack outcome per method",
    )
    save_figure(fig, os.path.join(edir, "results.png"))
    est = np.array([r[2] for r in all_timings if r[0] != "none"])
    ret = np.array([r[3] for r in all_timings if r[0] != "none"])
    if len(est):
        log.info("eval: mean estimate %.4fs vs retrain %.4fs (x%.1f)", est.mean(), ret.mean(), ret.mean() / max(est.mean(), 1e-12))


def cmd_sweep(cfg: ExperimentConfig) -> None:
    corpus = build_corpus(cfg)
    table = build_table(cfg)
    ens, _ = load_trained(cfg)
    targets = target_list(cfg, corpus)
    budgets = [float(b) for b in cfg.sweep_budgets.split(",") if b.strip()]
    horizons = [int(t) for t in cfg.sweep_horizons.split(",") if t.strip()]
    if not budgets or not horizons:
        raise ConfigError("sweep needs non-empty sweep_budgets and sweep_horizons")
    estimators = {}
    rows = []
    grid = np.zeros((len(budgets), len(horizons)))
    for t in targets:
        corpus_t = _with_target(corpus, t)
        estimators[t] = InfluenceEstimator(
            ens, corpus_t, table, influence_config(cfg), cfg.neg_k, cfg.sample_seed
        )
    for bi, budget in enumerate(budgets):
        for hi, horizon in enumerate(horizons):
            gains = []
            for t in targets:
                env = _build_env(
                    cfg,
                    _with_target(corpus, t),
                    table,
                    ens,
                    estimator=estimators[t],
                    budget=budget,
                    horizon=horizon,
                )
                episode, _ = run_method(cfg, env, cfg.sweep_method, t)
                gains.append(episode.reward)
            grid[bi, hi] = float(np.mean(gains))
            rows.append((budget, horizon, grid[bi, hi]))
    sdir = os.path.join(cfg.outdir, "sweep")
    write_csv(os.path.join(sdir, "sweep.csv"), ["budget", "horizon", "mrr_gain"], rows)
    fig = heatmap_figure(budgets, horizons, grid, f"Estimated MRR gain ({cfg.sweep_method})")
    save_figure(fig, os.path.join(sdir, "sweep.png"))
    log.info("sweep: %d cells over %d targets -> %s", len(rows), len(targets), sdir)


def _ablate_hs(cfg: ExperimentConfig) -> None:
    corpus = build_corpus(cfg)
    table = build_table(cfg)
    ens, _ = load_trained(cfg)
    targets = target_list(cfg, corpus)
    target = cfg.ablate_target or targets[0]
    corpus_t = _with_target(corpus, target)
    episodes = cfg.ablate_episodes or cfg.episodes
    env = _build_env(cfg, corpus_t, table, ens)
    curves = {}
    final_rows = []
    for variant in (Variant.HS, Variant.NON_HS, Variant.RANDOM_HS):
        result = train_agent(
            env,
            episodes=episodes,
            lr=cfg.lr,
            seed=_target_seed(cfg, target, "agent"),
            variant=variant,
            tree_seed=cfg.tree_seed,
            updates_per_episode=cfg.updates_per_episode,
            eval_every=cfg.eval_every,
        )
        curves[variant.value] = result.curve
        final_rows.append((variant.value, result.curve[-1][1] if result.curve else 0.0))
    adir = os.path.join(cfg.outdir, "ablate")
    write_csv(
        os.path.join(adir, "hs_curves.csv"),
        ["variant", "episode", "mrr_gain"],
        [(v, ep, g) for v, curve in curves.items() for ep, g in curve],
    )
    write_csv(os.path.join(adir, "hs_final.csv"), ["variant", "final_gain"], final_rows)
    fig = curves_figure(
        {v: ([p[0] for p in c], [p[1] for p in c]) for v, c in curves.items()},
        ylabel="estimated MRR gain",
        title=f"Hierarchical-structure ablation ({target})",
    )
    save_figure(fig, os.path.join(adir, "ablate_hs.png"))
    log.info("ablate hs: finals %s", final_rows)


def _popularity_bin(corpus: Corpus, news_id: str, order: list[str]) -> int:
    """Quartile by popularity rank; bin 0 is the top-25% most clicked."""
    pos = order.index(news_id)
    return min(3, pos * 4 // len(order))


def _ablate_risk(cfg: ExperimentConfig) -> None:
    corpus = build_corpus(cfg)
    table = build_table(cfg)
    ens, _ = load_trained(cfg)
    targets = target_list(cfg, corpus)
    target = cfg.ablate_target or targets[0]
    corpus_t = _with_target(corpus, target)
    episodes = cfg.ablate_episodes or cfg.episodes

    pop_order = sorted(corpus_t.viewed_ids, key=lambda n: (-corpus_t.click_counts[n], n))
    target_art = corpus_t.articles[corpus_t.target]
    sims = []
    for nid in corpus_t.viewed_ids:
        for wi, wj in content_pairs(corpus_t.articles[nid], target_art):
            sims.append(1.0 - word_distance(table, wi, wj))
    sims = np.sort(np.array(sims))
    sim_cuts = [sims[len(sims) // 4], sims[len(sims) // 2], sims[3 * len(sims) // 4]]

    runs = {}
    estimator = InfluenceEstimator(ens, corpus_t, table, influence_config(cfg), cfg.neg_k, cfg.sample_seed)
    for mode in (RiskMode.FULL, RiskMode.NO_FREQUENCY, RiskMode.NO_SIMILARITY):
        env = _build_env(cfg, corpus_t, table, ens, estimator=estimator, budget=cfg.ablate_budget, risk_mode=mode.value)
        result = train_agent(
            env,
            episodes=episodes,
            lr=cfg.lr,
            seed=_target_seed(cfg, target, "agent"),
            tree_seed=cfg.tree_seed,
            updates_per_episode=cfg.updates_per_episode,
            eval_every=cfg.eval_every,
        )
        runs[mode] = result

    # matched attack effect: first checkpoint reaching match_fraction of FULL's final gain
    full_final = runs[RiskMode.FULL].curve[-1][1] if runs[RiskMode.FULL].curve else 0.0
    threshold = cfg.match_fraction * full_final
    rows, share_rows = [], []
    shares_by_mode = {}
    for mode, result in runs.items():
        matched_i = len(result.eval_episodes) - 1
        for i, (ep, gain) in enumerate(result.curve):
            if gain >= threshold:
                matched_i = i
                break
        episode = result.eval_episodes[matched_i]
        perts = episode.perturbations
        pop_shares = np.zeros(4)
        sim_shares = np.zeros(4)
        for p in perts:
            pop_shares[_popularity_bin(corpus_t, p.news, pop_order)] += 1
            sim = 1.0 - word_distance(table, p.old_word, p.new_word)
            sim_shares[int(np.searchsorted(sim_cuts, sim, side="right"))] += 1
        n = max(len(perts), 1)
        pop_shares /= n
        sim_shares /= n
        shares_by_mode[mode.value] = (pop_shares, sim_shares)
        rows.append((mode.value, result.curve[matched_i][0] if result.curve else 0, len(perts), episode.reward))
        for b, label in enumerate(("0-25%", "25-50%", "50-75%", "75-100%")):
            share_rows.append((mode.value, "popularity", label, float(pop_shares[b])))
        for b, label in enumerate(("0-25%", "25-50%", "50-75%", "75-100%")):
            share_rows.append((mode.value, "similarity", label, float(sim_shares[b])))

    adir = os.path.join(cfg.outdir, "ablate")
    write_csv(
        os.path.join(adir, "risk_matched.csv"),
        ["mode", "matched_episode", "n_perturbations", "matched_gain"],
        rows,
    )
    write_csv(
        os.path.join(adir, "risk_quartiles.csv"),
        ["mode", "kind", "bin", "share"],
        share_rows,
    )
    # popularity bins: 0-25% is the most-popular quartile; similarity bins: 0-25% least similar
    fig = bar_figure(
        ["0-25%", "25-50%", "50-75%", "75-100%"],
        {m: list(shares_by_mode[m][0]) for m in shares_by_mode},
        ylabel="share of perturbations",
        title="Perturbed-news popularity quartiles",
    )
    save_figure(fig, os.path.join(adir, "risk_popularity.png"))
    fig = bar_figure(
        ["0-25%", "25-50%", "50-75%", "75-100%"],
        {m: list(shares_by_mode[m][1]) for m in shares_by_mode},
        ylabel="share of replacements",
        title="Replaced-word similarity quartiles",
    )
    save_figure(fig, os.path.join(adir, "risk_similarity.png"))
    log.info("ablate risk: matched rows %s", rows)


def cmd_ablate(cfg: ExperimentConfig, kind: str) -> None:
    if kind == "hs":
        _ablate_hs(cfg)
    elif kind == "risk":
        _ablate_risk(cfg)
    else:
        raise ConfigError("ablate kind must be 'hs' or 'risk'")


def cmd_deviation(cfg: ExperimentConfig) -> None:
    results_path = os.path.join(cfg.outdir, "eval", "results.csv")
    if not os.path.exists(results_path):
        raise ConfigError("eval results not found; run `poisonbench eval` first")
    header, rows = read_csv(results_path)
    col = {name: i for i, name in enumerate(header)}
    out_rows = []
    for method in METHODS:
        sub = [r for r in rows if r[col["method"]] == method]
        online_gain = float(np.mean([float(r[col["online_gain"]]) for r in sub]))
        offline_gain = float(np.mean([float(r[col["offline_gain"]]) for r in sub]))
        out_rows.append((method, offline_gain, online_gain, online_gain - offline_gain))
    ddir = os.path.join(cfg.outdir, "deviation")
    write_csv(
        os.path.join(ddir, "deviation.csv"),
        ["method", "offline_gain", "online_gain", "deviation"],
        out_rows,
    )
    write_markdown_table(
        os.path.join(ddir, "deviation.md"),
        ["method", "offline gain", "online gain", "deviation"],
        [(m, f"{o:+.4f}", f"{n:+.4f}", f"{d:+.4f}") for m, o, n, d in out_rows],
    )
    fig = bar_figure(
        [r[0] for r in out_rows],
        {"deviation": [r[3] for r in out_rows]},
        ylabel="online gain - offline gain",
        title="Simulator deviation per method",
    )
    save_figure(fig, os.path.join(ddir, "deviation.png"))
    log.info("deviation: %s", out_rows)
