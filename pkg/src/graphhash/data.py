"""Interaction logs: loading, dense re-indexing, seeded splits and the
transductive filter.

Records are kept in file order with duplicates intact; the graph module
collapses repeated (user, item) pairs when it builds the adjacency.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, SchemaError

TRAIN, VAL, TEST = 0, 1, 2
UNSPLIT = -1
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}

MODES = ("retrieval", "ctr")


@dataclass
class InteractionDataset:
    """Dense-indexed interaction records.

    ``users[r]``, ``items[r]`` are dense IDs of record ``r``; ``labels`` is
    set only in CTR mode; ``split`` holds TRAIN/VAL/TEST or UNSPLIT.
    """

    users: np.ndarray
    items: np.ndarray
    n_users: int
    n_items: int
    user_tokens: list[str]
    item_tokens: list[str]
    mode: str = "retrieval"
    labels: np.ndarray | None = None
    split: np.ndarray = field(default=None)  # type: ignore[assignment]
    seed: int | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        if self.split is None:
            self.split = np.full(len(self.users), UNSPLIT, dtype=np.int8)
        else:
            self.split = np.asarray(self.split, dtype=np.int8)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.mode not in MODES:
            raise SchemaError(f"unknown mode {self.mode!r}")
        if (self.labels is None) != (self.mode == "retrieval"):
            raise SchemaError("labels must be present iff mode is 'ctr'")
        for arr in (self.users, self.items, self.split):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def is_split(self) -> bool:
        return len(self) == 0 or bool((self.split != UNSPLIT).all())

    def mask(self, which: int) -> np.ndarray:
        return self.split == which

    def records(self, which: int | None = None):
        """Return ``(users, items, labels)`` restricted to one split."""
        if which is None:
            sel = slice(None)
        else:
            sel = self.mask(which)
        labels = None if self.labels is None else self.labels[sel]
        return self.users[sel], self.items[sel], labels

    @property
    def user_freq(self) -> np.ndarray:
        u, _, _ = self.records(TRAIN)
        return np.bincount(u, minlength=self.n_users)

    @property
    def item_freq(self) -> np.ndarray:
        _, i, _ = self.records(TRAIN)
        return np.bincount(i, minlength=self.n_items)

    def split_sizes(self) -> dict[str, int]:
        return {name: int((self.split == k).sum()) for k, name in SPLIT_NAMES.items()}

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_records": len(self),
            "split_sizes": self.split_sizes(),
            "seed": self.seed,
        }

    def replace(self, **changes) -> "InteractionDataset":
        kw = dict(
            users=self.users, items=self.items, n_users=self.n_users,
            n_items=self.n_items, user_tokens=self.user_tokens,
            item_tokens=self.item_tokens, mode=self.mode, labels=self.labels,
            split=self.split, seed=self.seed,
        )
        kw.update(changes)
        return InteractionDataset(**kw)


def _densify(tokens: list[str]) -> tuple[np.ndarray, list[str]]:
    index: dict[str, int] = {}
    ids = np.empty(len(tokens), dtype=np.int64)
    for r, tok in enumerate(tokens):
        ids[r] = index.setdefault(tok, len(index))
    return ids, list(index)


def from_records(users, items, labels=None, mode: str | None = None) -> InteractionDataset:
    """Build an unsplit dataset from raw token sequences (first-appearance IDs)."""
    users = [str(u) for u in users]
    items = [str(i) for i in items]
    if len(users) != len(items):
        raise DataError("users and items differ in length")
    if mode is None:
        mode = "retrieval" if labels is None else "ctr"
    u, utok = _densify(users)
    i, itok = _densify(items)
    lab = None if labels is None else np.asarray(labels, dtype=np.int8)
    return InteractionDataset(u, i, len(utok), len(itok), utok, itok, mode=mode, labels=lab)


def binarize_rating(rating: float) -> int | None:
    """CTR label convention: >3 is a click, <3 is not, 3 is dropped."""
    if rating > 3:
        return 1
    if rating < 3:
        return 0
    return None


def load_interactions(path, mode: str = "retrieval", binarize: bool = False) -> InteractionDataset:
    """Read a ``user<TAB>item[<TAB>label]`` file.

    Lines starting with ``#`` and blank lines are skipped. In ``ctr`` mode the
    third column is required; with ``binarize=True`` it is read as a rating
    and mapped through :func:`binarize_rating`.
    """
    if mode not in MODES:
        raise SchemaError(f"unknown mode {mode!r}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    users: list[str] = []
    items: list[str] = []
    labels: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2 or len(parts) > 3 or not parts[0] or not parts[1]:
                raise ParseError(f"expected 2 or 3 tab-separated fields, got {line!r}", line_no)
            if mode == "ctr":
                if len(parts) < 3 or parts[2] == "":
                    raise SchemaError(f"line {line_no}: label column missing in ctr mode")
                try:
                    value = float(parts[2])
                except ValueError:
                    raise ParseError(f"label {parts[2]!r} is not numeric", line_no) from None
                if binarize:
                    lab = binarize_rating(value)
                    if lab is None:
                        continue
                elif value in (0.0, 1.0):
                    lab = int(value)
                else:
                    raise ParseError(f"label {parts[2]!r} is not 0/1", line_no)
                labels.append(lab)
            users.append(parts[0])
            items.append(parts[1])
    return from_records(users, items, labels if mode == "ctr" else None, mode=mode)


def split(ds: InteractionDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> InteractionDataset:
    """Seeded global random split of records into train/val/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or ratios[0] <= 0:
        raise DataError(f"invalid split ratios {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {sum(ratios)!r}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(n * ratios[0] + 1e-9))
    n_val = min(int(np.floor(n * ratios[1] + 1e-9)), n - n_train)
    tags = np.empty(n, dtype=np.int8)
    tags[perm[:n_train]] = TRAIN
    tags[perm[n_train:n_train + n_val]] = VAL
    tags[perm[n_train + n_val:]] = TEST
    return ds.replace(split=tags, seed=seed)


def enforce_transductive(ds: InteractionDataset) -> tuple[InteractionDataset, dict]:
    """Drop val/test records with entities unseen in train and re-densify IDs.

    Returns the filtered dataset and a report of how many records were dropped
    per split and how many entities disappeared.
    """
    if not ds.is_split:
        raise DataError("dataset must be split before enforcing the transductive setting")
    train = ds.mask(TRAIN)
    if not train.any():
        raise DataError("train split is empty")
    seen_u = np.zeros(ds.n_users, dtype=bool)
    seen_i = np.zeros(ds.n_items, dtype=bool)
    seen_u[ds.users[train]] = True
    seen_i[ds.items[train]] = True
    keep = train | (seen_u[ds.users] & seen_i[ds.items])

    report = {
        "dropped_val": int((~keep & ds.mask(VAL)).sum()),
        "dropped_test": int((~keep & ds.mask(TEST)).sum()),
        "dropped_users": int((~seen_u).sum()),
        "dropped_items": int((~seen_i).sum()),
    }
    # Remaining entities keep their relative order, so first-appearance
    # order over the surviving records is preserved.
    new_u = np.cumsum(seen_u) - 1
    new_i = np.cumsum(seen_i) - 1
    out = ds.replace(
        users=new_u[ds.users[keep]],
        items=new_i[ds.items[keep]],
        n_users=int(seen_u.sum()),
        n_items=int(seen_i.sum()),
        user_tokens=[t for t, s in zip(ds.user_tokens, seen_u) if s],
        item_tokens=[t for t, s in zip(ds.item_tokens, seen_i) if s],
        labels=None if ds.labels is None else ds.labels[keep],
        split=ds.split[keep],
    )
    return out, report


def prepare(path, mode="retrieval", ratios=(0.8, 0.1, 0.1), seed=0, binarize=False):
    """load -> split -> enforce_transductive in one call."""
    ds = load_interactions(path, mode=mode, binarize=binarize)
    return enforce_transductive(split(ds, ratios, seed))


# -- serialization ---------------------------------------------------------

def write_dataset(ds: InteractionDataset, outdir, extra: dict | None = None) -> dict:
    """Write manifest.json, {train,val,test}.tsv and the two ID maps."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for k, name in SPLIT_NAMES.items():
        m = ds.mask(k)
        with open(outdir / f"{name}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            if ds.labels is None:
                for u, i in zip(ds.users[m].tolist(), ds.items[m].tolist()):
                    fh.write(f"{u}\t{i}\n")
            else:
                for u, i, y in zip(ds.users[m].tolist(), ds.items[m].tolist(), ds.labels[m].tolist()):
                    fh.write(f"{u}\t{i}\t{y}\n")
    for fname, tokens in (("user_map.tsv", ds.user_tokens), ("item_map.tsv", ds.item_tokens)):
        with open(outdir / fname, "w", encoding="utf-8", newline="\n") as fh:
            for dense, tok in enumerate(tokens):
                fh.write(f"{tok}\t{dense}\n")
    manifest = ds.summary()
    if extra:
        manifest.update(extra)
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _read_split(path: Path, ctr: bool):
    if os.path.getsize(path) == 0:
        cols = 3 if ctr else 2
        return np.zeros((0, cols), dtype=np.int64)
    arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    return arr


def read_dataset(indir) -> InteractionDataset:
    """Inverse of :func:`write_dataset`."""
    indir = Path(indir)
    with open(indir / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    ctr = manifest["mode"] == "ctr"
    parts, tags = [], []
    for k, name in SPLIT_NAMES.items():
        arr = _read_split(indir / f"{name}.tsv", ctr)
        parts.append(arr)
        tags.append(np.full(len(arr), k, dtype=np.int8))
    data = np.concatenate(parts)
    maps = []
    for fname in ("user_map.tsv", "item_map.tsv"):
        with open(indir / fname, encoding="utf-8") as fh:
            maps.append([line.rstrip("\n").rsplit("\t", 1)[0] for line in fh])
    return InteractionDataset(
        users=data[:, 0], items=data[:, 1],
        n_users=manifest["n_users"], n_items=manifest["n_items"],
        user_tokens=maps[0], item_tokens=maps[1], mode=manifest["mode"],
        labels=data[:, 2] if ctr else None,
        split=np.concatenate(tags), seed=manifest.get("seed"),
    )
