"""Bucket assignment schemes for user and item IDs.

Every scheme returns a :class:`HashAssignment` holding one or two bucket
codes per entity. Entities with two codes are embedded as the sum of the two
rows. All schemes are pure functions of their inputs and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import Partition, relabel
from .errors import DataError
from .graph import BipartiteGraph

SINGLE_SCHEMES = ("full", "random", "frequency", "lsh_structure", "graphhash")
DOUBLE_SCHEMES = ("double", "double_frequency", "double_graphhash")
SCHEMES = SINGLE_SCHEMES + DOUBLE_SCHEMES

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass
class HashAssignment:
    scheme: str
    user_codes: np.ndarray  # (n_users, arity)
    item_codes: np.ndarray  # (n_items, arity)
    user_table_rows: int
    item_table_rows: int
    seed: int | None = None

    def __post_init__(self):
        self.user_codes = _as_code_matrix(self.user_codes)
        self.item_codes = _as_code_matrix(self.item_codes)
        if self.user_codes.shape[1] != self.item_codes.shape[1] and len(self.user_codes) and len(self.item_codes):
            raise DataError("user and item code arity differ")
        for codes, rows in ((self.user_codes, self.user_table_rows), (self.item_codes, self.item_table_rows)):
            if codes.size and (codes.min() < 0 or codes.max() >= rows):
                raise DataError(f"bucket code outside table of {rows} rows")

    @property
    def arity(self) -> int:
        return int(max(self.user_codes.shape[1], self.item_codes.shape[1]))

    @property
    def n_users(self) -> int:
        return len(self.user_codes)

    @property
    def n_items(self) -> int:
        return len(self.item_codes)

    def n_params(self, dim: int) -> int:
        return (self.user_table_rows + self.item_table_rows) * dim

    def codes(self, side: str) -> np.ndarray:
        return self.user_codes if side == "user" else self.item_codes

    def rows(self, side: str) -> int:
        return self.user_table_rows if side == "user" else self.item_table_rows

    def same_as(self, other: "HashAssignment") -> bool:
        return (self.scheme == other.scheme
                and self.user_table_rows == other.user_table_rows
                and self.item_table_rows == other.item_table_rows
                and np.array_equal(self.user_codes, other.user_codes)
                and np.array_equal(self.item_codes, other.item_codes))


def _as_code_matrix(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim == 1:
        codes = codes[:, None]
    return codes


def _check_buckets(*buckets: int, least: int = 1) -> None:
    for b in buckets:
        if int(b) != b or b < least:
            raise ValueError(f"bucket count must be an integer >= {least}, got {b!r}")


# -- universal hashing -----------------------------------------------------

def _odd_multipliers(seed: int, count: int) -> list[tuple[np.uint64, np.uint64]]:
    rng = np.random.default_rng(seed)
    params = []
    seen = set()
    while len(params) < count:
        a = int(rng.integers(0, 2 ** 63, dtype=np.uint64)) * 2 + 1
        b = int(rng.integers(0, 2 ** 63, dtype=np.uint64))
        if a in seen:
            continue
        seen.add(a)
        params.append((np.uint64(a & 0xFFFFFFFFFFFFFFFF), np.uint64(b)))
    return params


def multiply_shift(ids: np.ndarray, buckets: int, a: np.uint64, b: np.uint64) -> np.ndarray:
    """``((a*x + b) mod 2^64) >> 32`` scaled onto ``[0, buckets)``."""
    x = np.asarray(ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = (a * x + b) & _MASK64
    hi = h >> np.uint64(32)
    return ((hi * np.uint64(buckets)) >> np.uint64(32)).astype(np.int64)


def splitmix64(ids: np.ndarray) -> np.ndarray:
    """Bijective 64-bit finaliser (from SplitMix64) used to scramble IDs.

    Multiply-shift alone maps consecutive IDs onto a regular lattice, so two
    such hashes of ``0..n-1`` collide jointly far less often than
    independent hashes would; mixing first removes that structure.
    """
    z = np.asarray(ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _permuted_modulo(n: int, buckets: int, seed: int) -> np.ndarray:
    """Seeded random permutation of IDs followed by modulo.

    Balanced like plain modulo, injective when ``buckets >= n``.
    """
    perm = np.random.default_rng(seed).permutation(n)
    return perm % buckets


def _top_by_frequency(freq: np.ndarray, count: int) -> np.ndarray:
    """IDs of the ``count`` most frequent entities; ties go to lower IDs."""
    order = np.lexsort((np.arange(len(freq)), -np.asarray(freq)))
    return order[:count]


# -- schemes ---------------------------------------------------------------

def hash_full(n_users: int, n_items: int) -> HashAssignment:
    return HashAssignment("full", np.arange(n_users), np.arange(n_items), n_users, n_items)


def hash_modulo(n_users: int, n_items: int, buckets_u: int, buckets_i: int) -> HashAssignment:
    """Random hashing baseline: dense ID modulo bucket count."""
    _check_buckets(buckets_u, buckets_i)
    return HashAssignment("random", np.arange(n_users) % buckets_u,
                          np.arange(n_items) % buckets_i, int(buckets_u), int(buckets_i))


def _frequency_side(freq: np.ndarray, buckets: int) -> np.ndarray:
    n = len(freq)
    dedicated = buckets // 2
    rest = buckets - dedicated
    codes = np.arange(n) % rest + dedicated
    top = _top_by_frequency(freq, min(dedicated, n))
    codes[top] = np.arange(len(top))
    return codes


def hash_frequency(user_freq, item_freq, buckets_u: int, buckets_i: int) -> HashAssignment:
    """Half of the buckets go to the most frequent entities, one each; the
    rest of the entities share the other half by modulo."""
    _check_buckets(buckets_u, buckets_i, least=2)
    return HashAssignment("frequency", _frequency_side(np.asarray(user_freq), buckets_u),
                          _frequency_side(np.asarray(item_freq), buckets_i),
                          int(buckets_u), int(buckets_i))


def _double_side(n: int, buckets: int, seed: int, offset: int = 0) -> np.ndarray:
    (a1, b1), (a2, b2) = _odd_multipliers(seed, 2)
    ids = splitmix64(np.arange(n))
    return np.stack([multiply_shift(ids, buckets, a1, b1) + offset,
                     multiply_shift(ids, buckets, a2, b2) + offset], axis=1)


def hash_double(n_users: int, n_items: int, buckets_u: int, buckets_i: int, seed: int = 0) -> HashAssignment:
    """Two independent multiply-shift hashes into one table per side."""
    _check_buckets(buckets_u, buckets_i)
    return HashAssignment("double", _double_side(n_users, buckets_u, seed),
                          _double_side(n_items, buckets_i, seed + 1),
                          int(buckets_u), int(buckets_i), seed=seed)


def _double_frequency_side(freq: np.ndarray, buckets: int, seed: int) -> np.ndarray:
    n = len(freq)
    dedicated = buckets // 2
    codes = _double_side(n, buckets - dedicated, seed, offset=dedicated)
    top = _top_by_frequency(freq, min(dedicated, n))
    codes[top] = np.arange(len(top))[:, None]
    return codes


def hash_double_frequency(user_freq, item_freq, buckets_u: int, buckets_i: int, seed: int = 0) -> HashAssignment:
    """Frequency allocation for the top half, double hashing for the rest.

    Dedicated entities get their row repeated as both codes.
    """
    _check_buckets(buckets_u, buckets_i, least=2)
    return HashAssignment("double_frequency",
                          _double_frequency_side(np.asarray(user_freq), buckets_u, seed),
                          _double_frequency_side(np.asarray(item_freq), buckets_i, seed + 1),
                          int(buckets_u), int(buckets_i), seed=seed)


def lsh_codes(features, bits: int, seed: int) -> np.ndarray:
    """Sign pattern of ``bits`` Gaussian hyperplane projections as an integer.

    ``features`` may be a dense array or a scipy sparse matrix (one row per
    entity). A zero projection counts as a 0 bit.
    """
    n_features = features.shape[1]
    planes = np.random.default_rng(seed).standard_normal((n_features, bits))
    proj = np.asarray(features @ planes)
    weights = (1 << np.arange(bits)).astype(np.int64)
    return (proj > 0).astype(np.int64) @ weights


def hash_lsh_structure(g: BipartiteGraph, bits_u: int, bits_i: int | None = None, seed: int = 0) -> HashAssignment:
    """Random-hyperplane LSH over one-hop neighbour indicator vectors."""
    bits_i = bits_u if bits_i is None else bits_i
    if bits_u < 1 or bits_i < 1 or bits_u > 62 or bits_i > 62:
        raise ValueError("bits must be in [1, 62]")
    A = g.adjacency()
    uc = lsh_codes(A, bits_u, seed)
    ic = lsh_codes(A.T.tocsr(), bits_i, seed + 1)
    return HashAssignment("lsh_structure", uc, ic, 1 << bits_u, 1 << bits_i, seed=seed)


def lsh_bits_for(rows: int) -> int:
    """Smallest bit count whose table covers ``rows`` rows."""
    return max(1, math.ceil(math.log2(max(rows, 2))))


def _redensify(labels: np.ndarray) -> tuple[np.ndarray, int]:
    uniq, inv = np.unique(labels, return_inverse=True)
    # keep first-appearance order so codes follow the relabelling
    _, first = np.unique(labels, return_index=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    return rank[inv], len(uniq)


def graph_hash(p: Partition) -> HashAssignment:
    """Cluster label as bucket code, with separate user and item tables.

    User codes are the distinct user-side labels re-densified in order of
    appearance; likewise for items. A user and an item sharing a cluster do
    not share a row.
    """
    p = relabel(p)
    uc, nu = _redensify(p.user_label)
    ic, ni = _redensify(p.item_label)
    return HashAssignment("graphhash", uc, ic, nu, ni)


def double_graph_hash(p: Partition, buckets_u: int | None = None, buckets_i: int | None = None,
                      seed: int = 0) -> HashAssignment:
    """Pair a random hash with GraphHash inside the GraphHash tables.

    The first code is a seeded permuted-modulo hash onto ``buckets`` rows
    (default: the GraphHash row count); the second is the GraphHash code.
    Table sizes stay those of GraphHash.
    """
    gh = graph_hash(p)
    bu = gh.user_table_rows if buckets_u is None else int(buckets_u)
    bi = gh.item_table_rows if buckets_i is None else int(buckets_i)
    if not (1 <= bu <= max(gh.user_table_rows, 1)) or not (1 <= bi <= max(gh.item_table_rows, 1)):
        raise ValueError("random-hash buckets must lie in [1, GraphHash table rows]")
    uc = np.stack([_permuted_modulo(gh.n_users, bu, seed), gh.user_codes[:, 0]], axis=1)
    ic = np.stack([_permuted_modulo(gh.n_items, bi, seed + 1), gh.item_codes[:, 0]], axis=1)
    return HashAssignment("double_graphhash", uc, ic, gh.user_table_rows, gh.item_table_rows, seed=seed)


# -- diagnostics -----------------------------------------------------------

def _side_stats(codes: np.ndarray, rows: int) -> dict:
    n = len(codes)
    if n == 0:
        return {"entities": 0, "table_rows": rows, "used_rows": 0, "max_bucket": 0,
                "mean_bucket": 0.0, "colliding_pairs": 0, "collision_fraction": 0.0}
    # entities colliding on all codes share an identical code tuple
    _, tuple_counts = np.unique(codes, axis=0, return_counts=True)
    pairs = int((tuple_counts * (tuple_counts - 1) // 2).sum())
    per_row = np.bincount(codes.ravel(), minlength=rows)
    used = per_row[per_row > 0]
    total = n * (n - 1) // 2
    return {
        "entities": n,
        "table_rows": rows,
        "used_rows": int(len(used)),
        "max_bucket": int(per_row.max()),
        "mean_bucket": float(used.mean()),
        "colliding_pairs": pairs,
        "collision_fraction": pairs / total if total else 0.0,
    }


def collision_stats(a: HashAssignment) -> dict:
    """Per side: table rows, bucket occupancy and pairs sharing all codes."""
    return {
        "scheme": a.scheme,
        "user": _side_stats(a.user_codes, a.user_table_rows),
        "item": _side_stats(a.item_codes, a.item_table_rows),
    }


# -- file format -----------------------------------------------------------

def write_assignment(a: HashAssignment, path, extra: dict | None = None) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# scheme={a.scheme}\n")
        fh.write(f"# seed={a.seed}\n")
        fh.write(f"# user_table_rows={a.user_table_rows}\n")
        fh.write(f"# item_table_rows={a.item_table_rows}\n")
        for key, value in sorted((extra or {}).items()):
            fh.write(f"# {key}={value}\n")
        for side, codes in (("U", a.user_codes), ("I", a.item_codes)):
            for idx, row in enumerate(codes.tolist()):
                fh.write(side + "\t" + str(idx) + "\t" + "\t".join(map(str, row)) + "\n")


def read_assignment(path) -> tuple[HashAssignment, dict]:
    header: dict[str, str] = {}
    rows: dict[str, list] = {"U": [], "I": []}
    with open(Path(path), encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key] = value
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4) or parts[0] not in rows:
                raise DataError(f"line {line_no}: bad assignment row {line!r}")
            rows[parts[0]].append([int(x) for x in parts[1:]])
    codes = {}
    for side, entries in rows.items():
        entries.sort()
        if [e[0] for e in entries] != list(range(len(entries))):
            raise DataError(f"assignment file has gaps on side {side}")
        codes[side] = np.array([e[1:] for e in entries], dtype=np.int64).reshape(len(entries), -1) \
            if entries else np.zeros((0, 1), dtype=np.int64)
    seed = header.get("seed", "None")
    a = HashAssignment(header["scheme"], codes["U"], codes["I"],
                       int(header["user_table_rows"]), int(header["item_table_rows"]),
                       seed=None if seed == "None" else int(seed))
    return a, header
