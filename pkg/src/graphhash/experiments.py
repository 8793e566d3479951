"""Building assignments from a config and running small train/eval sweeps.

These helpers are shared by ``graphhash bench`` and the acceptance suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .clustering import Partition, louvain
from .config import GRAPH_SCHEMES, RunConfig, SchemeSection
from .data import TEST, InteractionDataset
from .errors import ConfigError
from .evaluation import evaluate_ctr, evaluate_retrieval
from .graph import BipartiteGraph, build_graph
from .hashing import (HashAssignment, double_graph_hash, graph_hash, hash_double, hash_double_frequency,
                      hash_frequency, hash_full, hash_lsh_structure, hash_modulo, lsh_bits_for)
from .models import ModelConfig, RecModel
from .training import TrainConfig, train


def build_assignment(scheme: SchemeSection, ds: InteractionDataset, g: BipartiteGraph,
                     partition: Partition | None = None) -> HashAssignment:
    """Hash assignment for ``scheme`` on the train graph ``g``.

    Bucket-based schemes with ``buckets_* = 0`` take the GraphHash table size
    at the same resolution, so every compressed scheme is compared at equal
    (or, for LSH, the next power of two) row budget.
    """
    name = scheme.name
    if name == "full":
        return hash_full(ds.n_users, ds.n_items)
    if partition is None and (name in GRAPH_SCHEMES or not (scheme.buckets_user and scheme.buckets_item)):
        partition = louvain(g, scheme.resolution)
    if name == "graphhash":
        return graph_hash(partition)
    if name == "double_graphhash":
        return double_graph_hash(partition, scheme.buckets_user or None, scheme.buckets_item or None,
                                 seed=scheme.seed)
    if scheme.buckets_user and scheme.buckets_item:
        bu, bi = scheme.buckets_user, scheme.buckets_item
    else:
        gh = graph_hash(partition)
        bu = scheme.buckets_user or gh.user_table_rows
        bi = scheme.buckets_item or gh.item_table_rows
    if name == "random":
        return hash_modulo(ds.n_users, ds.n_items, bu, bi)
    if name == "frequency":
        return hash_frequency(ds.user_freq, ds.item_freq, bu, bi)
    if name == "double":
        return hash_double(ds.n_users, ds.n_items, bu, bi, seed=scheme.seed)
    if name == "double_frequency":
        return hash_double_frequency(ds.user_freq, ds.item_freq, bu, bi, seed=scheme.seed)
    if name == "lsh_structure":
        bits_u = scheme.bits_user or lsh_bits_for(bu)
        bits_i = scheme.bits_item or lsh_bits_for(bi)
        return hash_lsh_structure(g, bits_u, bits_i, seed=scheme.seed)
    raise ConfigError(f"unknown scheme {name!r}")


@dataclass
class RunResult:
    scheme: str
    seed: int
    n_params: int
    user_rows: int
    item_rows: int
    best_epoch: int
    val_metric: float
    metrics: dict
    model: RecModel


def run_once(ds: InteractionDataset, g: BipartiteGraph, assignment: HashAssignment,
             model_cfg: ModelConfig, train_cfg: TrainConfig, k: int = 20) -> RunResult:
    """Train one model from scratch and evaluate it on the test split."""
    model = RecModel(model_cfg, assignment, g, seed=train_cfg.seed)
    res = train(model, ds, train_cfg, graph=g)
    if model_cfg.backbone == "ctr_logistic":
        ev = evaluate_ctr(model, ds, TEST)
        metrics = {"logloss": ev["logloss"], "auc": ev["auc"]}
    else:
        ev = evaluate_retrieval(model, ds, g, TEST, k)
        metrics = {f"recall@{k}": ev["recall"], f"ndcg@{k}": ev["ndcg"]}
    return RunResult(assignment.scheme, train_cfg.seed, model.n_params, assignment.user_table_rows,
                     assignment.item_table_rows, res.best_epoch, res.best_metric, metrics, model)


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def resolution_sweep(cfg: RunConfig, datasets: dict[int, InteractionDataset], log=None) -> list[dict]:
    """One row per (scheme, resolution): table size plus metric mean/std over seeds.

    ``datasets`` maps seed -> split dataset. Baselines use the GraphHash row
    budget of the same resolution.
    """
    rows = []
    metric = "logloss" if cfg.ctr else f"recall@{cfg.eval_k[0]}"
    for scheme_name in cfg.bench.schemes:
        for resolution in cfg.bench.resolutions:
            values, sizes = [], None
            for seed in cfg.bench.seeds:
                ds = datasets[seed]
                g = build_graph(ds)
                part = louvain(g, resolution)
                sch = replace(cfg.scheme, name=scheme_name, resolution=resolution, seed=seed)
                a = build_assignment(sch, ds, g, part)
                r = run_once(ds, g, a, cfg.model, replace(cfg.train, seed=seed), cfg.eval_k[0])
                values.append(r.metrics[metric])
                sizes = (part.n_clusters, r.user_rows, r.item_rows, r.n_params)
                if log:
                    log(f"{scheme_name} resolution={resolution:g} seed={seed} {metric}={values[-1]:.4f}")
            m, s = mean_std(values)
            rows.append({"scheme": scheme_name, "resolution": resolution, "n_clusters": sizes[0],
                         "user_rows": sizes[1], "item_rows": sizes[2], "n_params": sizes[3],
                         "metric": metric, "mean": m, "std": s, "values": values})
    return rows


def gamma_sweep(cfg: RunConfig, datasets: dict[int, InteractionDataset], log=None) -> list[dict]:
    """DirectAU uniformity weight sweep; one row per (scheme, gamma)."""
    rows = []
    metric = f"recall@{cfg.eval_k[0]}"
    for scheme_name in cfg.bench.schemes:
        for gamma in cfg.bench.gammas:
            values, n_params = [], 0
            for seed in cfg.bench.seeds:
                ds = datasets[seed]
                g = build_graph(ds)
                sch = replace(cfg.scheme, name=scheme_name, resolution=cfg.bench.gamma_resolution, seed=seed)
                a = build_assignment(sch, ds, g)
                mcfg = replace(cfg.model, loss="directau", gamma=gamma)
                r = run_once(ds, g, a, mcfg, replace(cfg.train, seed=seed), cfg.eval_k[0])
                values.append(r.metrics[metric])
                n_params = r.n_params
                if log:
                    log(f"{scheme_name} gamma={gamma:g} seed={seed} {metric}={values[-1]:.4f}")
            m, s = mean_std(values)
            rows.append({"scheme": scheme_name, "gamma": gamma, "n_params": n_params, "metric": metric,
                         "mean": m, "std": s, "values": values})
    return rows
