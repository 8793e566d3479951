"""Bundled fixtures, synthetic graph generators and the MovieLens-100k
fetcher.

MovieLens-100k is not redistributed with this package. :func:`fetch_movielens100k`
pulls the copy shipped inside the ``pytorch-widedeep`` wheel on PyPI and
caches it as TSV.
"""

from __future__ import annotations

import hashlib
import io
import os
import re
import time
import urllib.parse
import urllib.request
import zipfile
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import BipartiteGraph, from_edges

_WHEEL_PROJECT = "pytorch-widedeep"
_WHEEL_FILE = "pytorch_widedeep-1.6.5-py3-none-any.whl"
_WHEEL_SHA256 = "664082437882ba90a8bb0d59e62a1d885c7581f0bfbc17011cd8839dfb018c83"
_WHEEL_MEMBER = "pytorch_widedeep/datasets/data/MovieLens100k_data.parquet.brotli"
_INDEX_URL = os.environ.get("GRAPHHASH_INDEX_URL", "https://pypi.org/simple/")

ML100K_USERS = 943
ML100K_ITEMS = 1682
ML100K_RATINGS = 100_000

# published Gowalla statistics, used to size the synthetic stand-in
GOWALLA_USERS = 29_858
GOWALLA_ITEMS = 49_981
GOWALLA_INTERACTIONS = 1_027_370


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture file (``toy200.tsv``, ``two_block.tsv``, ``diagonal.tsv``)."""
    ref = resources.files("graphhash") / "fixtures" / name
    path = Path(str(ref))
    if not path.exists():
        raise DataError(f"no bundled fixture named {name!r}")
    return path


def cache_dir() -> Path:
    root = os.environ.get("GRAPHHASH_DATA")
    path = Path(root) if root else Path.home() / ".cache" / "graphhash"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _download(url: str, retries: int = 4, timeout: float = 120.0) -> bytes:
    last = None
    for attempt in range(retries):
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                return resp.read()
        except OSError as exc:  # URLError and timeouts
            last = exc
            time.sleep(2 ** attempt)
    raise DataError(f"download failed: {url}: {last}")


def fetch_movielens100k(directory=None) -> Path:
    """Return a TSV ``user<TAB>movie<TAB>rating`` with the 100k MovieLens ratings.

    Ratings keep their original order. Downloads once, then reads the cache.
    """
    directory = Path(directory) if directory else cache_dir()
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / "ml100k_ratings.tsv"
    if out.exists():
        return out
    page_url = urllib.parse.urljoin(_INDEX_URL, f"{_WHEEL_PROJECT}/")
    page = _download(page_url).decode("utf-8", "replace")
    links = re.findall(r'href="([^"]*' + re.escape(_WHEEL_FILE) + r'[^"]*)"', page)
    if not links:
        raise DataError(f"{_WHEEL_FILE} not listed at {page_url}")
    blob = _download(urllib.parse.urljoin(page_url, links[0].split("#")[0]))
    if hashlib.sha256(blob).hexdigest() != _WHEEL_SHA256:
        raise DataError(f"checksum mismatch for {_WHEEL_FILE}")
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        raw = zf.read(_WHEEL_MEMBER)
    import pyarrow.parquet as pq

    table = pq.read_table(io.BytesIO(raw))
    users = table.column("user_id").to_pylist()
    items = table.column("movie_id").to_pylist()
    ratings = table.column("rating").to_pylist()
    if len(users) != ML100K_RATINGS:
        raise DataError(f"unexpected MovieLens-100k size {len(users)}")
    tmp = out.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# MovieLens-100k ratings: user, movie, rating\n")
        for u, i, r in zip(users, items, ratings):
            fh.write(f"u{u}\tm{i}\t{r}\n")
    tmp.replace(out)
    return out


def movielens100k_retrieval(directory=None) -> Path:
    """Every rating as an implicit interaction (``user<TAB>movie``)."""
    src = fetch_movielens100k(directory)
    out = src.with_name("ml100k_retrieval.tsv")
    if not out.exists():
        with open(src, encoding="utf-8") as fin, open(out, "w", encoding="utf-8", newline="\n") as fout:
            for line in fin:
                if line.startswith("#"):
                    continue
                u, i, _ = line.rstrip("\n").split("\t")
                fout.write(f"{u}\t{i}\n")
    return out


# -- synthetic graphs ------------------------------------------------------

def two_block_graph() -> BipartiteGraph:
    """Two disjoint complete K_{2,2} blocks."""
    return from_edges([0, 0, 1, 1, 2, 2, 3, 3], [0, 1, 0, 1, 2, 3, 2, 3], 4, 4)


def diagonal_graph() -> BipartiteGraph:
    """Edges (u0, i0) and (u1, i1)."""
    return from_edges([0, 1], [0, 1], 2, 2)


def random_bipartite(rng: np.random.Generator, max_nodes: int = 8, p: float | None = None) -> BipartiteGraph:
    """Small Erdos-Renyi bipartite graph with at least one edge."""
    while True:
        n = int(rng.integers(2, max_nodes + 1))
        nu = int(rng.integers(1, n))
        ni = n - nu
        prob = rng.uniform(0.2, 0.8) if p is None else p
        A = rng.random((nu, ni)) < prob
        if A.any():
            u, i = np.nonzero(A)
            return from_edges(u, i, nu, ni)


def community_interactions(n_users: int, n_items: int, n_edges: int, n_communities: int,
                           p_in: float = 0.8, zipf: float = 1.0, seed: int = 0):
    """Synthetic interactions with planted communities and skewed popularity.

    Each edge picks a user by a power-law weight; with probability ``p_in``
    the item comes from the user's community, otherwise from anywhere, again
    by power-law popularity. Returns raw ``(users, items)`` arrays with
    repeats allowed.
    """
    rng = np.random.default_rng(seed)
    cu = rng.integers(0, n_communities, size=n_users)
    ci = rng.integers(0, n_communities, size=n_items)
    wu = 1.0 / np.arange(1, n_users + 1) ** (zipf * 0.6)
    wi = 1.0 / np.arange(1, n_items + 1) ** zipf
    wu = rng.permutation(wu)
    wi = rng.permutation(wi)

    users = rng.choice(n_users, size=n_edges, p=wu / wu.sum())
    items = np.empty(n_edges, dtype=np.int64)
    local = rng.random(n_edges) < p_in
    glob = ~local
    items[glob] = rng.choice(n_items, size=int(glob.sum()), p=wi / wi.sum())

    order = np.argsort(ci, kind="stable")
    bounds = np.searchsorted(ci[order], np.arange(n_communities + 1))
    cum = np.cumsum(wi[order])
    lidx = np.flatnonzero(local)
    comm = cu[users[lidx]]
    lo, hi = bounds[comm], bounds[comm + 1]
    empty = lo == hi
    base = np.where(lo > 0, cum[np.maximum(lo - 1, 0)], 0.0)
    top = np.where(hi > 0, cum[np.maximum(hi - 1, 0)], 0.0)
    r = base + rng.random(len(lidx)) * (top - base)
    pick = np.searchsorted(cum, r, side="right")
    pick = np.clip(pick, lo, np.maximum(hi - 1, lo))
    chosen = order[np.minimum(pick, n_items - 1)]
    fallback = rng.choice(n_items, size=int(empty.sum()), p=wi / wi.sum())
    chosen[empty] = fallback
    items[lidx] = chosen
    return users, items


def community_graph(n_users: int, n_items: int, n_edges: int, n_communities: int,
                    seed: int = 0, **kw) -> BipartiteGraph:
    u, i = community_interactions(n_users, n_items, n_edges, n_communities, seed=seed, **kw)
    return from_edges(u, i, n_users, n_items)


def gowalla_like_graph(seed: int = 0, train_fraction: float = 0.8) -> BipartiteGraph:
    """Synthetic graph sized like an 80% Gowalla train split (~0.8M edges)."""
    target = int(GOWALLA_INTERACTIONS * train_fraction)
    keys = np.zeros(0, dtype=np.int64)
    round_ = 0
    # popular pairs repeat often, so draw in rounds until enough distinct edges exist
    while len(keys) < target:
        u, i = community_interactions(GOWALLA_USERS, GOWALLA_ITEMS, target, n_communities=3000,
                                      seed=seed + 1000 * round_)
        keys = np.union1d(keys, u * GOWALLA_ITEMS + i)
        round_ += 1
    if len(keys) > target:
        keys = np.sort(np.random.default_rng(seed).choice(keys, size=target, replace=False))
    return from_edges(keys // GOWALLA_ITEMS, keys % GOWALLA_ITEMS, GOWALLA_USERS, GOWALLA_ITEMS)


def write_interactions(path, users, items, labels=None, prefix=("u", "i")) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r, (u, i) in enumerate(zip(np.asarray(users).tolist(), np.asarray(items).tolist())):
            line = f"{prefix[0]}{u}\t{prefix[1]}{i}"
            if labels is not None:
                line += f"\t{int(labels[r])}"
            fh.write(line + "\n")
    return path
