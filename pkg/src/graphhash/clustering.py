"""Bipartite modularity, deterministic Louvain and a brute-force oracle.

Modularity of a partition of users and items (Barber's bipartite form, with
a resolution multiplier on the null model)::

    Q = (1/m) * sum_C [ e_C - resolution * K_C * D_C / m ]

where ``e_C`` counts edges with both ends in ``C`` and ``K_C``/``D_C`` are
the summed user/item degrees inside ``C``.

Louvain visits nodes in index order (users, then items) and never shuffles,
so the output is a pure function of the graph and the resolution. Coarse
levels carry separate user-degree and item-degree mass for every
super-node, which keeps the coarse objective equal to the flat bipartite Q.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numba
import numpy as np

from .errors import DataError
from .graph import BipartiteGraph

EPS_GAIN = 1e-9
_TIE_TOL = 1e-10  # on un-normalised move scores (edge units)
BRUTE_FORCE_MAX_NODES = 10


@dataclass
class Partition:
    user_label: np.ndarray
    item_label: np.ndarray
    resolution: float = 1.0
    trace: list[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.user_label = np.asarray(self.user_label, dtype=np.int64)
        self.item_label = np.asarray(self.item_label, dtype=np.int64)

    @property
    def n_clusters(self) -> int:
        labels = np.concatenate([self.user_label, self.item_label])
        return int(len(np.unique(labels)))

    @property
    def labels(self) -> np.ndarray:
        """All labels, users first."""
        return np.concatenate([self.user_label, self.item_label])

    def same_as(self, other: "Partition") -> bool:
        return (np.array_equal(self.user_label, other.user_label)
                and np.array_equal(self.item_label, other.item_label))


def _check_covers(g: BipartiteGraph, p: Partition) -> None:
    if len(p.user_label) != g.n_users or len(p.item_label) != g.n_items:
        raise DataError("partition does not cover every node of the graph")


def _cluster_sums(g: BipartiteGraph, p: Partition):
    """Exact integer within-cluster edge count and sum_C K_C * D_C."""
    labels = p.labels
    if len(labels) and labels.min() < 0:
        raise DataError("negative cluster label")
    n_c = int(labels.max()) + 1 if len(labels) else 0
    eu, ei = g.edges()
    within = int((p.user_label[eu] == p.item_label[ei]).sum())
    K = np.bincount(p.user_label, weights=None if g.n_users == 0 else g.k, minlength=n_c)
    D = np.bincount(p.item_label, weights=None if g.n_items == 0 else g.d, minlength=n_c)
    null = sum(int(a) * int(b) for a, b in zip(K.astype(np.int64).tolist(), D.astype(np.int64).tolist()) if a and b)
    return within, null


def modularity(g: BipartiteGraph, p: Partition, resolution: float | None = None) -> float:
    """Bipartite modularity of ``p``; ``resolution`` defaults to ``p.resolution``."""
    if g.m == 0:
        raise DataError("modularity is undefined on a graph without edges")
    _check_covers(g, p)
    gamma = p.resolution if resolution is None else float(resolution)
    within, null = _cluster_sums(g, p)
    m = g.m
    return (within - gamma * null / m) / m


def random_walk_forms_check(g: BipartiteGraph, p: Partition) -> tuple[float, float, float]:
    """Evaluate Q (resolution 1) three ways.

    ``q_a`` is the direct definition, ``q_b`` weights each edge by the
    item-side transition probability ``A_ui / d_i`` times the item's
    stationary mass ``d_i / m``, ``q_c`` does the same from the user side.
    All three are summed per cluster with compensated summation.
    """
    if g.m == 0:
        raise DataError("modularity is undefined on a graph without edges")
    _check_covers(g, p)
    m = float(g.m)
    k = g.k.astype(np.float64)
    d = g.d.astype(np.float64)
    eu, ei = g.edges()
    inside = p.user_label[eu] == p.item_label[ei]
    eu, ei = eu[inside], ei[inside]
    clusters = np.intersect1d(p.user_label, p.item_label)

    terms_a, terms_b, terms_c = [], [], []
    for c in clusters.tolist():
        us = np.flatnonzero(p.user_label == c)
        its = np.flatnonzero(p.item_label == c)
        sel = p.user_label[eu] == c
        cu, ci = eu[sel], ei[sel]
        kd = math.fsum(np.outer(k[us], d[its]).ravel().tolist())
        terms_a.append((len(cu) - kd / m) / m)
        terms_b.append(math.fsum(((1.0 / d[ci]) * (d[ci] / m)).tolist()) - kd / m ** 2)
        terms_c.append(math.fsum(((1.0 / k[cu]) * (k[cu] / m)).tolist()) - kd / m ** 2)
    return math.fsum(terms_a), math.fsum(terms_b), math.fsum(terms_c)


def relabel(p: Partition) -> Partition:
    """Map labels to 0, 1, 2, ... by first appearance over users then items."""
    labels = p.labels
    if len(labels) == 0:
        return Partition(p.user_label.copy(), p.item_label.copy(), p.resolution, list(p.trace))
    _, first = np.unique(labels, return_index=True)
    # rank of each distinct label by position of its first occurrence
    order = np.argsort(first, kind="stable")
    uniq = np.unique(labels)
    new_of = np.empty(len(uniq), dtype=np.int64)
    new_of[order] = np.arange(len(uniq))
    new = new_of[np.searchsorted(uniq, labels)]
    nu = len(p.user_label)
    return Partition(new[:nu], new[nu:], p.resolution, list(p.trace))


# -- Louvain ---------------------------------------------------------------

@numba.njit(cache=True)
def _level_quality(indptr, indices, weights, K, D, self_w, comm, gamma, m):
    n = len(K)
    within = 0.0
    Kc = np.zeros(n)
    Dc = np.zeros(n)
    for v in range(n):
        c = comm[v]
        within += self_w[v]
        Kc[c] += K[v]
        Dc[c] += D[v]
        for p in range(indptr[v], indptr[v + 1]):
            if comm[indices[p]] == c:
                within += 0.5 * weights[p]
    null = 0.0
    for c in range(n):
        null += Kc[c] * Dc[c]
    return (within - gamma * null / m) / m


@numba.njit(cache=True)
def _sweep(indptr, indices, weights, K, D, comm, Ktot, Dtot, nw, seen, touched, gamma, m, tie_tol):
    """One pass of greedy local moves over nodes in index order.

    Returns (number of moves, summed gain in Q units).
    """
    n = len(K)
    inv = gamma / m
    moves = 0
    gain = 0.0
    for v in range(n):
        start = indptr[v]
        end = indptr[v + 1]
        if start == end:
            continue
        cv = comm[v]
        nt = 0
        for p in range(start, end):
            c = comm[indices[p]]
            if not seen[c]:
                seen[c] = True
                touched[nt] = c
                nt += 1
            nw[c] += weights[p]
        kv = K[v]
        dv = D[v]
        Ktot[cv] -= kv
        Dtot[cv] -= dv
        cur = nw[cv] - inv * (kv * Dtot[cv] + Ktot[cv] * dv)
        best_c = -1
        best = 0.0
        for t in range(nt):
            c = touched[t]
            if c == cv:
                continue
            s = nw[c] - inv * (kv * Dtot[c] + Ktot[c] * dv)
            if best_c < 0 or s > best + tie_tol or (s >= best - tie_tol and c < best_c):
                best = s
                best_c = c
        target = cv
        if best_c >= 0 and best > cur + tie_tol:
            target = best_c
            moves += 1
            gain += (best - cur) / m
        comm[v] = target
        Ktot[target] += kv
        Dtot[target] += dv
        for t in range(nt):
            c = touched[t]
            nw[c] = 0.0
            seen[c] = False
    return moves, gain


@numba.njit(cache=True)
def _renumber(comm):
    n = len(comm)
    new_id = np.full(n, -1, dtype=np.int64)
    nxt = 0
    out = np.empty(n, dtype=np.int64)
    for v in range(n):
        c = comm[v]
        if new_id[c] < 0:
            new_id[c] = nxt
            nxt += 1
        out[v] = new_id[c]
    return out, nxt


@numba.njit(cache=True)
def _aggregate(indptr, indices, weights, K, D, self_w, comm, n_comm):
    n = len(K)
    # members grouped by community, ascending node order within each group
    count = np.zeros(n_comm + 1, dtype=np.int64)
    for v in range(n):
        count[comm[v] + 1] += 1
    start = np.cumsum(count)
    fill = start[:-1].copy()
    members = np.empty(n, dtype=np.int64)
    for v in range(n):
        c = comm[v]
        members[fill[c]] = v
        fill[c] += 1

    newK = np.zeros(n_comm)
    newD = np.zeros(n_comm)
    new_self = np.zeros(n_comm)
    new_ptr = np.zeros(n_comm + 1, dtype=np.int64)
    new_idx = np.empty(len(indices), dtype=np.int64)
    new_w = np.empty(len(indices))
    nw = np.zeros(n_comm)
    seen = np.zeros(n_comm, dtype=np.bool_)
    touched = np.empty(n_comm, dtype=np.int64)
    pos = 0
    for c in range(n_comm):
        nt = 0
        for q in range(start[c], start[c + 1]):
            v = members[q]
            newK[c] += K[v]
            newD[c] += D[v]
            new_self[c] += self_w[v]
            for p in range(indptr[v], indptr[v + 1]):
                cb = comm[indices[p]]
                if cb == c:
                    new_self[c] += 0.5 * weights[p]
                else:
                    if not seen[cb]:
                        seen[cb] = True
                        touched[nt] = cb
                        nt += 1
                    nw[cb] += weights[p]
        nbrs = np.sort(touched[:nt])
        for t in range(nt):
            cb = nbrs[t]
            new_idx[pos] = cb
            new_w[pos] = nw[cb]
            pos += 1
            nw[cb] = 0.0
            seen[cb] = False
        new_ptr[c + 1] = pos
    return new_ptr, new_idx[:pos].copy(), new_w[:pos].copy(), newK, newD, new_self


def _level0(g: BipartiteGraph):
    nu, ni = g.n_users, g.n_items
    n = nu + ni
    deg = np.concatenate([g.k, g.d]).astype(np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(deg, out=indptr[1:])
    indices = np.concatenate([g.user_indices + nu, g.item_indices]).astype(np.int64)
    weights = np.ones(len(indices))
    K = np.concatenate([g.k, np.zeros(ni)]).astype(np.float64)
    D = np.concatenate([np.zeros(nu), g.d]).astype(np.float64)
    return indptr, indices, weights, K, D, np.zeros(n)


def louvain(g: BipartiteGraph, resolution: float = 1.0, eps: float = EPS_GAIN,
            max_levels: int = 100, max_sweeps: int = 1000) -> Partition:
    """Deterministic Louvain maximisation of bipartite modularity.

    The returned partition is relabelled and carries ``trace``: the flat Q
    after every local-move sweep, in order.
    """
    if g.m == 0:
        raise DataError("louvain needs a graph with at least one edge")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    gamma = float(resolution)
    m = float(g.m)
    indptr, indices, weights, K, D, self_w = _level0(g)
    flat = np.arange(len(K), dtype=np.int64)
    trace = [_level_quality(indptr, indices, weights, K, D, self_w, flat, gamma, m)]

    for _ in range(max_levels):
        n = len(K)
        comm = np.arange(n, dtype=np.int64)
        Ktot, Dtot = K.copy(), D.copy()
        nw = np.zeros(n)
        seen = np.zeros(n, dtype=np.bool_)
        touched = np.empty(n, dtype=np.int64)
        level_moves = 0
        for _ in range(max_sweeps):
            moves, gain = _sweep(indptr, indices, weights, K, D, comm, Ktot, Dtot,
                                 nw, seen, touched, gamma, m, _TIE_TOL)
            level_moves += moves
            if moves:
                trace.append(_level_quality(indptr, indices, weights, K, D, self_w, comm, gamma, m))
            if moves == 0 or gain <= eps:
                break
        if level_moves == 0:
            break
        comm, n_comm = _renumber(comm)
        flat = comm[flat]
        if n_comm == n:
            break
        indptr, indices, weights, K, D, self_w = _aggregate(
            indptr, indices, weights, K, D, self_w, comm, n_comm)

    nu = g.n_users
    p = relabel(Partition(flat[:nu], flat[nu:], gamma))
    p.trace = trace
    return p


# -- brute force -----------------------------------------------------------

@lru_cache(maxsize=None)
def _set_partitions(n: int) -> np.ndarray:
    """All restricted-growth strings of length ``n`` (one per set partition)."""
    if n == 0:
        return np.zeros((1, 0), dtype=np.int8)
    rows = [[0]]
    for _ in range(n - 1):
        rows = [r + [c] for r in rows for c in range(max(r) + 2)]
    return np.asarray(rows, dtype=np.int8)


def brute_force_partition(g: BipartiteGraph, resolution: float = 1.0) -> tuple[Partition, float]:
    """Exhaustively maximise Q over every set partition of users and items.

    Ties keep the first maximiser in restricted-growth-string order, which
    puts the all-in-one partition first.
    """
    nu, ni = g.n_users, g.n_items
    n = nu + ni
    if n > BRUTE_FORCE_MAX_NODES:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_MAX_NODES} nodes, got {n}")
    if g.m == 0:
        raise DataError("modularity is undefined on a graph without edges")
    P = _set_partitions(n).astype(np.int64)
    eu, ei = g.edges()
    within = (P[:, eu] == P[:, nu + ei]).sum(axis=1)
    kd = np.outer(g.k, g.d).astype(np.int64)
    same = P[:, :nu, None] == P[:, None, nu:]
    null = (same * kd[None]).sum(axis=(1, 2))
    m = g.m
    q = (within - resolution * null / m) / m
    best_q = q.max()
    best = int(np.flatnonzero(q >= best_q - 1e-12)[0])
    p = relabel(Partition(P[best, :nu], P[best, nu:], resolution))
    return p, float(q[best])


def iter_set_partitions(items):
    """Yield set partitions of ``items`` as lists of blocks (small inputs only)."""
    items = list(items)
    for rgs in _set_partitions(len(items)):
        blocks: dict[int, list] = {}
        for x, b in zip(items, rgs.tolist()):
            blocks.setdefault(b, []).append(x)
        yield list(blocks.values())


# -- file format -----------------------------------------------------------

def write_partition(p: Partition, path, q: float | None = None, extra: dict | None = None) -> None:
    """``side<TAB>dense_id<TAB>cluster_id`` lines under a ``#`` header."""
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# resolution={p.resolution!r}\n")
        if q is not None:
            fh.write(f"# Q={q!r}\n")
        fh.write(f"# n_clusters={p.n_clusters}\n")
        for key, value in sorted((extra or {}).items()):
            fh.write(f"# {key}={value}\n")
        for side, labels in (("U", p.user_label), ("I", p.item_label)):
            for idx, c in enumerate(labels.tolist()):
                fh.write(f"{side}\t{idx}\t{c}\n")


def read_partition(path) -> tuple[Partition, dict]:
    header: dict[str, str] = {}
    rows: dict[str, list[tuple[int, int]]] = {"U": [], "I": []}
    with open(Path(path), encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key] = value
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in rows:
                raise DataError(f"line {line_no}: bad partition row {line!r}")
            rows[parts[0]].append((int(parts[1]), int(parts[2])))
    labels = {}
    for side, pairs in rows.items():
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise DataError(f"partition file has gaps on side {side}")
        labels[side] = np.array([c for _, c in pairs], dtype=np.int64)
    res = float(header.get("resolution", "1.0"))
    return Partition(labels["U"], labels["I"], res), header


__all__ = [
    "Partition", "modularity", "louvain", "relabel", "brute_force_partition",
    "random_walk_forms_check", "write_partition", "read_partition",
    "iter_set_partitions",
]
