"""Retrieval and CTR metrics, user-frequency subgroups, embedding
smoothness and retrieved-item degree."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.stats import rankdata

from .data import TEST, TRAIN, InteractionDataset
from .errors import DataError
from .graph import BipartiteGraph

DEFAULT_BINS = (0, 20, 40, 60, 80, 100)


# -- per-list metrics ------------------------------------------------------

def recall_at_k(topk, test_items, k: int) -> float:
    test = set(np.asarray(list(test_items)).tolist())
    if not test:
        raise ValueError("recall is undefined without test items")
    hits = sum(1 for x in list(topk)[:k] if x in test)
    return hits / len(test)


def _idcg(n: int) -> float:
    return float(np.sum(1.0 / np.log2(np.arange(2, n + 2))))


def ndcg_at_k(topk, test_items, k: int) -> float:
    test = set(np.asarray(list(test_items)).tolist())
    if not test:
        raise ValueError("NDCG is undefined without test items")
    dcg = sum(1.0 / math.log2(r + 2) for r, x in enumerate(list(topk)[:k]) if x in test)
    return dcg / _idcg(min(k, len(test)))


def auc(scores_pos, scores_neg) -> float:
    """Probability a positive outscores a negative (ties count 1/2), via the
    rank-sum statistic."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def auc_pairwise(scores_pos, scores_neg) -> float:
    """O(n_pos * n_neg) reference for :func:`auc`."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


# -- retrieval harness -----------------------------------------------------

def ground_truth(ds: InteractionDataset, which: int = TEST) -> dict[int, np.ndarray]:
    """Distinct held-out items per user for one split."""
    u, i, _ = ds.records(which)
    if len(u) == 0:
        return {}
    key = np.unique(u * ds.n_items + i)
    users, items = key // ds.n_items, key % ds.n_items
    cuts = np.flatnonzero(np.diff(users)) + 1
    return {int(g[0]): it for g, it in zip(np.split(users, cuts), np.split(items, cuts))}


def top_k(scores: np.ndarray, exclude: BipartiteGraph | None, users: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` item IDs per row of ``scores`` (rows align with ``users``),
    skipping each user's train items. Ties break toward lower item IDs."""
    s = np.array(scores, dtype=np.float64, copy=True, ndmin=2)
    users = np.asarray(users, dtype=np.int64)
    if exclude is not None and len(users):
        starts, ends = exclude.user_indptr[users], exclude.user_indptr[users + 1]
        rows = np.repeat(np.arange(len(users)), ends - starts)
        cols = exclude.user_indices[np.concatenate([np.arange(a, b) for a, b in zip(starts, ends)])
                                    if len(rows) else np.zeros(0, dtype=np.int64)]
        s[rows, cols] = -np.inf
    k = min(k, s.shape[1])
    if k < s.shape[1]:
        cand = np.argpartition(-s, k - 1, axis=1)[:, :k]
        # argpartition is arbitrary among items tied with the k-th score:
        # widen those rows to every tied item before sorting
        kth = np.take_along_axis(s, cand, 1).min(axis=1)
        ties = (s == kth[:, None]).sum(1) > (np.take_along_axis(s, cand, 1) == kth[:, None]).sum(1)
        if ties.any():
            out = np.empty((len(s), k), dtype=np.int64)
            for r in np.flatnonzero(ties):
                out[r] = np.lexsort((np.arange(s.shape[1]), -s[r]))[:k]
            rest = np.flatnonzero(~ties)
            vals = np.take_along_axis(s[rest], cand[rest], 1)
            order = np.lexsort((cand[rest], -vals), axis=-1)
            out[rest] = np.take_along_axis(cand[rest], order, 1)
            return out
    else:
        cand = np.tile(np.arange(s.shape[1]), (len(s), 1))
    vals = np.take_along_axis(s, cand, 1)
    order = np.lexsort((cand, -vals), axis=-1)
    return np.take_along_axis(cand, order, 1)


def evaluate_retrieval(model, ds: InteractionDataset, graph: BipartiteGraph, which: int = TEST,
                       k: int = 20, threads: int = 0, chunk: int = 2048) -> dict:
    """Recall@k and NDCG@k (percentages) averaged over users with held-out
    items, plus per-user values and the retrieved lists."""
    truth = ground_truth(ds, which)
    users = np.array(sorted(truth), dtype=np.int64)
    Z_u, Z_i = model.final_embeddings()

    def run(block):
        topk = top_k(Z_u[block] @ Z_i.T, graph, block, k)
        rec = np.array([recall_at_k(t, truth[u], k) for u, t in zip(block.tolist(), topk)])
        nd = np.array([ndcg_at_k(t, truth[u], k) for u, t in zip(block.tolist(), topk)])
        return topk, rec, nd

    blocks = [users[s:s + chunk] for s in range(0, len(users), chunk)] or [users]
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    if len(users) == 0:
        return {"recall": 0.0, "ndcg": 0.0, "users": users, "per_user_recall": np.zeros(0),
                "per_user_ndcg": np.zeros(0), "topk": np.zeros((0, k), dtype=np.int64)}
    topk = np.concatenate([p[0] for p in parts])
    rec = np.concatenate([p[1] for p in parts])
    nd = np.concatenate([p[2] for p in parts])
    return {"recall": 100.0 * float(rec.mean()), "ndcg": 100.0 * float(nd.mean()),
            "users": users, "per_user_recall": rec, "per_user_ndcg": nd, "topk": topk}


def evaluate_ctr(model, ds: InteractionDataset, which: int = TEST) -> dict:
    from .training import logloss

    u, i, y = ds.records(which)
    if len(u) == 0:
        raise DataError("no records in the evaluated split")
    p = model.predict_ctr(u, i)
    out = {"logloss": logloss(p, y), "users": u, "labels": y, "probs": p}
    out["auc"] = auc(p[y == 1], p[y == 0]) if 0 < y.sum() < len(y) else float("nan")
    return out


# -- subgroups -------------------------------------------------------------

def frequency_percentile(freq: np.ndarray) -> np.ndarray:
    """Percentile position in [0, 100) of each user when sorted by
    (train frequency, ID) ascending."""
    freq = np.asarray(freq)
    n = len(freq)
    order = np.lexsort((np.arange(n), freq))
    pct = np.empty(n)
    pct[order] = 100.0 * np.arange(n) / max(n, 1)
    return pct


def assign_bins(pct: np.ndarray, bins=DEFAULT_BINS) -> np.ndarray:
    edges = np.asarray(bins, dtype=np.float64)
    b = np.searchsorted(edges, pct, side="right") - 1
    return np.clip(b, 0, len(edges) - 2)


def subgroup_retrieval(per_user: dict[str, np.ndarray], users: np.ndarray, user_freq: np.ndarray,
                       bins=DEFAULT_BINS) -> dict[str, dict]:
    """Mean per-user metrics within each frequency-percentile bin.

    Keys are ``"lo-hi"``; bins without evaluated users are omitted.
    """
    bin_of = assign_bins(frequency_percentile(user_freq), bins)[users]
    out = {}
    for b in range(len(bins) - 1):
        sel = bin_of == b
        if not sel.any():
            continue
        entry = {"n_users": int(sel.sum())}
        for name, values in per_user.items():
            entry[name] = 100.0 * float(np.mean(values[sel]))
        out[f"{bins[b]}-{bins[b + 1]}"] = entry
    return out


def subgroup_ctr(users: np.ndarray, labels: np.ndarray, probs: np.ndarray, user_freq: np.ndarray,
                 bins=DEFAULT_BINS) -> dict[str, dict]:
    """LogLoss/AUC over the clicks generated by each bin's users."""
    from .training import logloss

    bin_of = assign_bins(frequency_percentile(user_freq), bins)[users]
    out = {}
    for b in range(len(bins) - 1):
        sel = bin_of == b
        if not sel.any():
            continue
        y, p = labels[sel], probs[sel]
        entry = {"n_records": int(sel.sum()), "logloss": logloss(p, y)}
        if 0 < y.sum() < len(y):
            entry["auc"] = auc(p[y == 1], p[y == 0])
        out[f"{bins[b]}-{bins[b + 1]}"] = entry
    return out


def subgroup_report(inputs: dict, user_freq: np.ndarray, bins=DEFAULT_BINS) -> dict[str, dict]:
    """Dispatch on the output of :func:`evaluate_retrieval` or :func:`evaluate_ctr`."""
    if "per_user_recall" in inputs:
        return subgroup_retrieval({"recall": inputs["per_user_recall"], "ndcg": inputs["per_user_ndcg"]},
                                  inputs["users"], user_freq, bins)
    return subgroup_ctr(inputs["users"], inputs["labels"], inputs["probs"], user_freq, bins)


# -- smoothness ------------------------------------------------------------

def smoothness(X: np.ndarray, clusters) -> float:
    """Mean over nodes of the average squared distance to the members of the
    node's cluster (the node itself included).

    ``clusters`` is either a label array (a partition) or a square sparse
    0/1 matrix whose row ``u`` marks the neighbourhood of ``u``.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("smoothness of an empty embedding set")
    sq = np.sum(X * X, axis=1)
    if sp.issparse(clusters):
        M = sp.csr_matrix(clusters, dtype=np.float64)
        if M.shape != (n, n):
            raise ValueError("neighbourhood matrix must be n x n")
        size = np.asarray(M.sum(axis=1)).ravel()
        sum_x = M @ X
        sum_sq = M @ sq
    else:
        labels = np.asarray(clusters, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError("one label per embedding row expected")
        _, inv = np.unique(labels, return_inverse=True)
        c = inv.max() + 1
        size_c = np.bincount(inv, minlength=c).astype(np.float64)
        sx_c = np.zeros((c, X.shape[1]))
        np.add.at(sx_c, inv, X)
        sq_c = np.bincount(inv, weights=sq, minlength=c)
        size, sum_x, sum_sq = size_c[inv], sx_c[inv], sq_c[inv]
    total = size * sq + sum_sq - 2.0 * np.sum(X * sum_x, axis=1)
    return float(np.mean(np.maximum(total, 0.0) / size))


def two_hop_clusters(g: BipartiteGraph, side: str = "user") -> sp.csr_matrix:
    """Binary matrix whose row ``u`` marks ``u`` and every same-side node
    sharing at least one neighbour with it."""
    A = g.adjacency()
    if side == "item":
        A = A.T.tocsr()
    elif side != "user":
        raise ValueError("side must be 'user' or 'item'")
    M = (A @ A.T).tocsr()
    M.data[:] = 1.0
    M = (M + sp.identity(A.shape[0], format="csr")).tocsr()
    M.data[:] = 1.0
    return M


def retrieved_item_degree(topk_lists, g: BipartiteGraph) -> float:
    """Mean train degree of every retrieved item across users."""
    items = np.concatenate([np.asarray(t, dtype=np.int64).ravel() for t in topk_lists]) \
        if len(topk_lists) else np.zeros(0, dtype=np.int64)
    if len(items) == 0:
        raise ValueError("no retrieved items")
    return float(g.d[items].mean())


# -- reports ---------------------------------------------------------------

def retrieval_report(model, ds, graph, k=20, bins=DEFAULT_BINS, which=TEST, threads=0) -> dict:
    res = evaluate_retrieval(model, ds, graph, which=which, k=k, threads=threads)
    return {
        "task": "retrieval", "k": k,
        f"recall_at_{k}": res["recall"], f"ndcg_at_{k}": res["ndcg"],
        "n_params": model.n_params,
        "retrieved_item_degree": retrieved_item_degree(res["topk"], graph) if len(res["topk"]) else None,
        "subgroups": subgroup_report(res, ds.user_freq, bins),
    }


def ctr_report(model, ds, bins=DEFAULT_BINS, which=TEST) -> dict:
    res = evaluate_ctr(model, ds, which)
    return {
        "task": "ctr", "logloss": res["logloss"], "auc": res["auc"],
        "n_params": model.n_params,
        "subgroups": subgroup_report(res, ds.user_freq, bins),
    }


def write_report(report: dict, json_path, csv_path, scheme: str, backbone: str) -> None:
    with open(Path(json_path), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    rows = []
    for key, value in report.items():
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            rows.append((scheme, backbone, key, "all", value))
    for bin_name, entry in report.get("subgroups", {}).items():
        for key, value in entry.items():
            rows.append((scheme, backbone, key, bin_name, value))
    with open(Path(csv_path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "backbone", "metric", "bin", "value"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], r[3], repr(r[4]) if isinstance(r[4], float) else r[4]])


__all__ = [
    "recall_at_k", "ndcg_at_k", "auc", "auc_pairwise", "evaluate_retrieval", "evaluate_ctr",
    "subgroup_report", "smoothness", "two_hop_clusters", "retrieved_item_degree",
    "retrieval_report", "ctr_report", "write_report",
]
