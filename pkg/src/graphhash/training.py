"""Losses with analytic gradients, Adam, negative sampling and the
early-stopping training loop.

Every ``*_grad`` function returns ``(loss, grads...)`` for a mean-reduced
loss; these are the derivatives checked against finite differences in the
test-suite.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp

from .data import TRAIN, VAL, InteractionDataset
from .errors import NumericError
from .graph import BipartiteGraph, build_graph
from .models import PROB_EPS, RecModel, sigmoid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 1e-2
    weight_decay: float = 1e-6
    batch_size: int | None = None  # None -> full batch
    patience: int = 50
    max_epochs: int = 1000
    seed: int = 0
    eval_k: int = 20
    eval_every: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.patience < 1 or self.max_epochs < 1 or self.eval_every < 1:
            raise ValueError("patience, max_epochs and eval_every must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


# -- losses ----------------------------------------------------------------

def bpr_loss(s_pos, s_neg) -> float:
    """Mean of ``-ln sigmoid(s_pos - s_neg)``."""
    diff = np.asarray(s_pos, dtype=np.float64) - np.asarray(s_neg, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, -diff)))


def bpr_loss_grad(s_pos, s_neg):
    diff = np.asarray(s_pos, dtype=np.float64) - np.asarray(s_neg, dtype=np.float64)
    n = diff.size
    loss = float(np.mean(np.logaddexp(0.0, -diff)))
    g = -sigmoid(-diff) / n
    return loss, g, -g


def logloss(p, y) -> float:
    """Mean binary cross-entropy with ``p`` clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def logloss_grad(logits, y):
    """LogLoss of ``sigmoid(logits)`` and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = sigmoid(z)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))))
    g = (p - y) / z.size
    g = np.where((p == pc), g, 0.0)
    return loss, g


def _normalize(X):
    norm = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise NumericError("cannot normalise a zero embedding")
    return X / norm, norm


def _normalize_backward(Xn, norm, G):
    return (G - Xn * np.sum(Xn * G, axis=1, keepdims=True)) / norm


def _uniformity_grad(Y):
    """``log mean_{i<j} exp(-2 |y_i - y_j|^2)`` and its gradient."""
    n = Y.shape[0]
    if n < 2:
        return 0.0, np.zeros_like(Y)
    sq = np.sum(Y * Y, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T), 0.0)
    iu = np.triu_indices(n, k=1)
    w = np.exp(-2.0 * d2)
    np.fill_diagonal(w, 0.0)
    total = w[iu].sum()
    value = float(np.log(total / len(iu[0])))
    # d/dy_i of sum_{i<j} w_ij = -4 sum_j w_ij (y_i - y_j)
    grad = -4.0 * (w.sum(axis=1)[:, None] * Y - w @ Y) / total
    return value, grad


def directau_loss(U, I, gamma: float) -> float:
    return directau_loss_grad(U, I, gamma)[0]


def directau_loss_grad(U, I, gamma: float):
    """Alignment plus ``gamma`` times uniformity on L2-normalised rows.

    ``U[b]`` and ``I[b]`` form positive pair ``b``. Alignment is the mean
    squared distance of normalised pairs; uniformity is the log of the mean
    Gaussian potential ``exp(-2 |x - y|^2)`` over distinct pairs, computed on
    each side and averaged.
    """
    U = np.asarray(U, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    Un, nu = _normalize(U)
    In, ni = _normalize(I)
    B = U.shape[0]
    diff = Un - In
    align = float(np.mean(np.sum(diff * diff, axis=1)))
    g_align = 2.0 * diff / B
    unif_u, gu = _uniformity_grad(Un)
    unif_i, gi = _uniformity_grad(In)
    loss = align + gamma * 0.5 * (unif_u + unif_i)
    G_un = g_align + gamma * 0.5 * gu
    G_in = -g_align + gamma * 0.5 * gi
    return loss, _normalize_backward(Un, nu, G_un), _normalize_backward(In, ni, G_in)


# -- optimiser -------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              l2_rows: dict | None = None):
    """One Adam update in place; L2 (``weight_decay * theta``) is added to
    the gradient first. ``l2_rows`` optionally limits the L2 term to the rows
    touched by the batch."""
    state.t += 1
    b1t = 1.0 - ADAM_BETA1 ** state.t
    b2t = 1.0 - ADAM_BETA2 ** state.t
    for name, g in grads.items():
        theta = params[name]
        if weight_decay:
            if l2_rows is not None and name in l2_rows:
                mask = l2_rows[name].reshape((-1,) + (1,) * (theta.ndim - 1))
                g = g + weight_decay * theta * mask
            else:
                g = g + weight_decay * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        theta -= lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)
    return params, state


# -- negative sampling -----------------------------------------------------

class NegativeSampler:
    """Uniform negatives among items the user has not interacted with in
    train, by rejection."""

    def __init__(self, g: BipartiteGraph):
        self.n_items = g.n_items
        self.keys = g.edges()[0] * g.n_items + g.user_indices  # sorted
        self.full = g.k >= g.n_items

    def _is_positive(self, users, items):
        keys = users * self.n_items + items
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys if len(self.keys) else np.zeros(len(keys), dtype=bool)

    def sample(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if np.any(self.full[users]):
            raise ValueError("a user has interacted with every item; no negative exists")
        out = rng.integers(0, self.n_items, size=len(users))
        bad = np.flatnonzero(self._is_positive(users, out))
        while len(bad):
            out[bad] = rng.integers(0, self.n_items, size=len(bad))
            bad = bad[self._is_positive(users[bad], out[bad])]
        return out


def sample_negative(g: BipartiteGraph, u: int, rng: np.random.Generator) -> int:
    return int(NegativeSampler(g).sample(np.array([u]), rng)[0])


# -- training loop ---------------------------------------------------------

def _scatter_rows(idx: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """Sum ``vals`` rows into an ``n``-row array at positions ``idx``."""
    M = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
    return M @ vals


def _touched(S: sp.csr_matrix, idx: np.ndarray) -> np.ndarray:
    rows = np.zeros(S.shape[1], dtype=bool)
    rows[S[np.unique(idx)].indices] = True
    return rows


@dataclass
class TrainResult:
    model: RecModel
    history: list[dict]
    best_epoch: int
    best_metric: float


@numba.njit(cache=True)
def _bpr_batch(Z_u, Z_i, users, items, neg):
    """Fused BPR forward/backward over a batch, accumulated in input order.

    Same result as :func:`bpr_loss_grad` followed by scattering the score
    gradients onto the embeddings, without materialising batch-sized copies.
    """
    n = len(users)
    d = Z_u.shape[1]
    G_u = np.zeros_like(Z_u)
    G_i = np.zeros_like(Z_i)
    total = 0.0
    for e in range(n):
        u, p, q = users[e], items[e], neg[e]
        diff = 0.0
        for c in range(d):
            diff += Z_u[u, c] * (Z_i[p, c] - Z_i[q, c])
        # -ln sigmoid(diff) and its derivative, both overflow-safe
        if diff >= 0:
            t = math.exp(-diff)
            total += math.log1p(t)
            g = -t / (1.0 + t) / n
        else:
            t = math.exp(diff)
            total += -diff + math.log1p(t)
            g = -1.0 / (1.0 + t) / n
        for c in range(d):
            zu = Z_u[u, c]
            G_u[u, c] += g * (Z_i[p, c] - Z_i[q, c])
            G_i[p, c] += g * zu
            G_i[q, c] -= g * zu
    return total / n, G_u, G_i


def _retrieval_step(model: RecModel, users, items, sampler, rng, cfg: TrainConfig):
    Z_u, Z_i = model.final_embeddings()
    n_u, n_i = Z_u.shape[0], Z_i.shape[0]
    if model.config.loss == "bpr":
        neg = sampler.sample(users, rng)
        loss, G_u, G_i = _bpr_batch(np.ascontiguousarray(Z_u), np.ascontiguousarray(Z_i),
                                    users.astype(np.int64), items.astype(np.int64), neg.astype(np.int64))
        item_idx = np.concatenate([items, neg])
    else:
        loss, gU, gI = directau_loss_grad(Z_u[users], Z_i[items], model.config.gamma)
        G_u = _scatter_rows(users, gU, n_u)
        G_i = _scatter_rows(items, gI, n_i)
        item_idx = items
    grads = model.backward(G_u, G_i)
    if model.A_hat is None:
        l2 = {"user_emb": _touched(model.S_u, users), "item_emb": _touched(model.S_i, item_idx)}
    else:
        l2 = None
    return loss, grads, l2


def _ctr_step(model: RecModel, users, items, labels):
    Z_u, Z_i = model.final_embeddings()
    b_u, b_i, b0 = model.entity_biases()
    zu, zi = Z_u[users], Z_i[items]
    logits = np.sum(zu * zi, 1) + b_u[users] + b_i[items] + b0
    loss, g = logloss_grad(logits, labels)
    G_u = _scatter_rows(users, g[:, None] * zi, Z_u.shape[0])
    G_i = _scatter_rows(items, g[:, None] * zu, Z_i.shape[0])
    grads = model.backward(G_u, G_i)
    grads.update(model.backward_bias(np.bincount(users, g, Z_u.shape[0]),
                                     np.bincount(items, g, Z_i.shape[0]), float(g.sum())))
    l2 = {"user_emb": _touched(model.S_u, users), "item_emb": _touched(model.S_i, items),
          "user_bias": _touched(model.S_u, users), "item_bias": _touched(model.S_i, items)}
    return loss, grads, l2


def validation_metric(model: RecModel, ds: InteractionDataset, which: int = VAL, k: int = 20,
                      graph: BipartiteGraph | None = None) -> float:
    """Recall@k (fraction) for retrieval, LogLoss for CTR, on one split."""
    from .evaluation import evaluate_ctr, evaluate_retrieval

    if model.config.backbone == "ctr_logistic":
        return evaluate_ctr(model, ds, which)["logloss"]
    graph = graph if graph is not None else build_graph(ds)
    return evaluate_retrieval(model, ds, graph, which=which, k=k)["recall"] / 100.0


def train(model: RecModel, ds: InteractionDataset, cfg: TrainConfig,
          graph: BipartiteGraph | None = None, metric_fn=None, log=None) -> TrainResult:
    """Minibatch training with per-epoch validation and early stopping.

    The best parameters by validation metric (max for retrieval, min for CTR)
    are restored into ``model`` before returning. ``metric_fn(model, epoch)``
    overrides the validation metric (used by tests).
    """
    ctr = model.config.backbone == "ctr_logistic"
    graph = graph if graph is not None else build_graph(ds)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    if ctr:
        users, items, labels = ds.records(TRAIN)
        labels = labels.astype(np.float64)
    else:
        users, items = graph.edges()
        labels = None
        sampler = NegativeSampler(graph)
    n = len(users)
    if n == 0:
        raise ValueError("no training records")
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    if metric_fn is None:
        def metric_fn(m, epoch):
            return validation_metric(m, ds, VAL, cfg.eval_k, graph)
    better = (lambda a, b: a < b) if ctr else (lambda a, b: a > b)

    history: list[dict] = []
    best_metric = math.inf if ctr else -math.inf
    best_epoch = 0
    best_params = model.copy_params()
    since_best = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if ctr:
                loss, grads, l2 = _ctr_step(model, users[idx], items[idx], labels[idx])
            else:
                loss, grads, l2 = _retrieval_step(model, users[idx], items[idx], sampler, rng, cfg)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            adam_step(model.params, grads, state, cfg.lr, cfg.weight_decay, l2)
            total += loss * len(idx)
            count += len(idx)
        train_loss = total / count
        if epoch % cfg.eval_every and epoch != cfg.max_epochs:
            continue
        metric = float(metric_fn(model, epoch))
        if not math.isfinite(metric):
            raise NumericError(f"non-finite validation metric at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_metric": metric,
                        "elapsed_s": time.perf_counter() - t0})
        if log is not None:
            log(history[-1])
        if better(metric, best_metric):
            best_metric, best_epoch, since_best = metric, epoch, 0
            best_params = model.copy_params()
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    model.load_params(best_params)
    return TrainResult(model, history, best_epoch, best_metric)


def train_loss(model: RecModel, ds: InteractionDataset, graph: BipartiteGraph | None = None,
               seed: int = 0) -> float:
    """Full-train-set loss at the current parameters (fixed negatives by seed)."""
    rng = np.random.default_rng(seed)
    if model.config.backbone == "ctr_logistic":
        u, i, y = ds.records(TRAIN)
        return _ctr_step(model, u, i, y.astype(np.float64))[0]
    graph = graph if graph is not None else build_graph(ds)
    u, i = graph.edges()
    return _retrieval_step(model, u, i, NegativeSampler(graph), rng, None)[0]


def write_history(history: list[dict], path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_metric", "elapsed_s"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_metric"]),
                        f"{h['elapsed_s']:.3f}"])
