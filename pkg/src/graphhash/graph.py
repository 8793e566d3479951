"""Immutable user-item bipartite graph stored as CSR in both directions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import TRAIN, InteractionDataset
from .errors import DataError


@dataclass(frozen=True)
class BipartiteGraph:
    n_users: int
    n_items: int
    user_indptr: np.ndarray
    user_indices: np.ndarray  # item neighbours of each user, ascending
    item_indptr: np.ndarray
    item_indices: np.ndarray  # user neighbours of each item, ascending

    @property
    def m(self) -> int:
        return int(len(self.user_indices))

    @property
    def k(self) -> np.ndarray:
        """User degrees."""
        return np.diff(self.user_indptr)

    @property
    def d(self) -> np.ndarray:
        """Item degrees."""
        return np.diff(self.item_indptr)

    def user_neighbors(self, u: int) -> np.ndarray:
        return self.user_indices[self.user_indptr[u]:self.user_indptr[u + 1]]

    def item_neighbors(self, i: int) -> np.ndarray:
        return self.item_indices[self.item_indptr[i]:self.item_indptr[i + 1]]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Edge list ``(users, items)`` sorted lexicographically."""
        users = np.repeat(np.arange(self.n_users), self.k)
        return users, self.user_indices.copy()

    def adjacency(self) -> sp.csr_matrix:
        """Binary ``n_users x n_items`` CSR matrix."""
        data = np.ones(self.m, dtype=np.float64)
        return sp.csr_matrix((data, self.user_indices, self.user_indptr),
                             shape=(self.n_users, self.n_items))

    def transpose(self) -> "BipartiteGraph":
        """Swap the roles of users and items."""
        return BipartiteGraph(self.n_items, self.n_users, self.item_indptr,
                              self.item_indices, self.user_indptr, self.user_indices)


def _csr_from_pairs(rows: np.ndarray, cols: np.ndarray, n_rows: int):
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
    return indptr, cols.astype(np.int64)


def from_edges(users, items, n_users: int | None = None, n_items: int | None = None) -> BipartiteGraph:
    """Build a graph from (possibly repeated) edge arrays; repeats collapse."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.shape != items.shape:
        raise DataError("edge arrays differ in length")
    if n_users is None:
        n_users = int(users.max()) + 1 if len(users) else 0
    if n_items is None:
        n_items = int(items.max()) + 1 if len(items) else 0
    if len(users) and (users.min() < 0 or users.max() >= n_users
                       or items.min() < 0 or items.max() >= n_items):
        raise DataError("edge endpoint out of range")
    key = np.unique(users * max(n_items, 1) + items)
    u = key // max(n_items, 1)
    i = key % max(n_items, 1)
    uptr, uidx = _csr_from_pairs(u, i, n_users)
    iptr, iidx = _csr_from_pairs(i, u, n_items)
    for a in (uptr, uidx, iptr, iidx):
        a.setflags(write=False)
    return BipartiteGraph(n_users, n_items, uptr, uidx, iptr, iidx)


def build_graph(ds: InteractionDataset, which: int = TRAIN) -> BipartiteGraph:
    """Binary adjacency from the records of one split (train by default)."""
    if not ds.is_split:
        raise DataError("dataset must be split before building the graph")
    u, i, _ = ds.records(which)
    return from_edges(u, i, ds.n_users, ds.n_items)


def neighbor_signature(g: BipartiteGraph, side: str, idx: int) -> sp.csr_matrix:
    """One-hop neighbourhood of a node as a 1 x n binary sparse row."""
    if side == "user":
        n, width, nbrs = g.n_users, g.n_items, g.user_neighbors
    elif side == "item":
        n, width, nbrs = g.n_items, g.n_users, g.item_neighbors
    else:
        raise ValueError(f"side must be 'user' or 'item', got {side!r}")
    if not 0 <= idx < n:
        raise IndexError(f"{side} id {idx} out of range [0, {n})")
    cols = nbrs(idx)
    return sp.csr_matrix((np.ones(len(cols)), cols, [0, len(cols)]), shape=(1, width))


def write_edges(g: BipartiteGraph, path) -> None:
    u, i = g.edges()
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        for a, b in zip(u.tolist(), i.tolist()):
            fh.write(f"{a}\t{b}\n")
