"""Bucketed embedding tables and the desk-scale backbones (MF, LightGCN,
logistic CTR head).

Entity embeddings are gathered from bucket rows through a sparse
``entities x rows`` count matrix ``S`` (``E = S @ W``); gradients flow back
with ``S.T``. LightGCN propagates the gathered per-entity matrices over the
full user-item graph.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .graph import BipartiteGraph
from .hashing import HashAssignment

BACKBONES = ("mf", "lightgcn", "ctr_logistic")
LOSSES = ("bpr", "directau", "logloss")
PROB_EPS = 1e-7


@dataclass
class ModelConfig:
    backbone: str = "mf"
    dim: int = 64
    n_layers: int = 0
    loss: str = "bpr"
    gamma: float = 1.0
    init_std: float = 0.01

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.loss == "directau" and self.gamma <= 0:
            raise ValueError("gamma must be positive for directau")
        if (self.backbone == "ctr_logistic") != (self.loss == "logloss"):
            raise ValueError("ctr_logistic pairs with logloss and only with logloss")


@dataclass
class EmbeddingTable:
    weights: np.ndarray

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def init_table(rows: int, dim: int, rng: np.random.Generator, std: float = 0.01) -> EmbeddingTable:
    return EmbeddingTable(rng.normal(0.0, std, size=(rows, dim)))


def lookup(table: EmbeddingTable | np.ndarray, codes) -> np.ndarray:
    """Embedding of one entity: the row, or the sum of its rows."""
    w = table.weights if isinstance(table, EmbeddingTable) else np.asarray(table)
    codes = np.atleast_1d(np.asarray(codes, dtype=np.int64))
    if codes.size == 0 or codes.size > 2:
        raise ValueError("an entity has one or two bucket codes")
    if codes.min() < 0 or codes.max() >= w.shape[0]:
        raise IndexError(f"bucket code out of range for a table of {w.shape[0]} rows")
    return w[codes].sum(axis=0)


def code_matrix(codes: np.ndarray, rows: int) -> sp.csr_matrix:
    """Sparse ``entities x rows`` matrix whose product with a table gathers
    (and sums) each entity's rows."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim == 1:
        codes = codes[:, None]
    n, arity = codes.shape
    r = np.repeat(np.arange(n), arity)
    S = sp.csr_matrix((np.ones(n * arity), (r, codes.ravel())), shape=(n, rows))
    S.sum_duplicates()
    return S


def mf_score(u_emb: np.ndarray, i_emb: np.ndarray):
    """Dot product along the last axis."""
    return np.sum(np.asarray(u_emb) * np.asarray(i_emb), axis=-1)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def ctr_score(u_emb, i_emb, b_u=0.0, b_i=0.0, b0=0.0):
    """Click probability ``sigmoid(u.i + b_u + b_i + b0)`` kept inside
    ``[1e-7, 1 - 1e-7]``."""
    p = sigmoid(mf_score(u_emb, i_emb) + b_u + b_i + b0)
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def normalized_adjacency(g: BipartiteGraph) -> sp.csr_matrix:
    """``D_U^{-1/2} A D_I^{-1/2}``; degree-0 nodes get a zero normaliser."""
    A = g.adjacency()
    with np.errstate(divide="ignore"):
        du = np.where(g.k > 0, 1.0 / np.sqrt(g.k), 0.0)
        di = np.where(g.d > 0, 1.0 / np.sqrt(g.d), 0.0)
    return (sp.diags(du) @ A @ sp.diags(di)).tocsr()


def lightgcn_propagate(g: BipartiteGraph | sp.spmatrix, X_U: np.ndarray, X_I: np.ndarray, n_layers: int):
    """Mean of layer-0..n_layers embeddings under symmetric-normalised
    message passing between users and items.

    ``g`` may be a graph or a precomputed :func:`normalized_adjacency`.
    The operator is symmetric, so the same call maps output gradients to
    input gradients.
    """
    if n_layers < 0:
        raise ValueError("n_layers must be >= 0")
    A_hat = normalized_adjacency(g) if isinstance(g, BipartiteGraph) else g
    if X_U.shape[0] != A_hat.shape[0] or X_I.shape[0] != A_hat.shape[1]:
        raise DataError("embedding rows do not match the graph")
    if n_layers == 0:
        return X_U.copy(), X_I.copy()
    A_t = A_hat.T.tocsr()
    acc_u, acc_i = X_U.copy(), X_I.copy()
    cur_u, cur_i = X_U, X_I
    for _ in range(n_layers):
        cur_u, cur_i = A_hat @ cur_i, A_t @ cur_u
        acc_u += cur_u
        acc_i += cur_i
    scale = 1.0 / (n_layers + 1)
    return acc_u * scale, acc_i * scale


class RecModel:
    """Bucketed user/item tables plus backbone configuration."""

    def __init__(self, config: ModelConfig, assignment: HashAssignment,
                 graph: BipartiteGraph | None = None, seed: int = 0):
        self.config = config
        self.assignment = assignment
        self.seed = seed
        rng = np.random.default_rng(seed)
        d = config.dim
        self.params: dict[str, np.ndarray] = {
            "user_emb": init_table(assignment.user_table_rows, d, rng, config.init_std).weights,
            "item_emb": init_table(assignment.item_table_rows, d, rng, config.init_std).weights,
        }
        if config.backbone == "ctr_logistic":
            self.params["user_bias"] = np.zeros(assignment.user_table_rows)
            self.params["item_bias"] = np.zeros(assignment.item_table_rows)
            self.params["global_bias"] = np.zeros(1)
        self.S_u = code_matrix(assignment.user_codes, assignment.user_table_rows)
        self.S_i = code_matrix(assignment.item_codes, assignment.item_table_rows)
        self.A_hat = None
        if config.backbone == "lightgcn" and config.n_layers > 0:
            if graph is None:
                raise ValueError("lightgcn needs the training graph")
            if graph.n_users != assignment.n_users or graph.n_items != assignment.n_items:
                raise DataError("graph and assignment disagree on entity counts")
            self.A_hat = normalized_adjacency(graph)

    # -- forward / backward -------------------------------------------------

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def entity_embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-entity rows (summed for two-code schemes), before propagation."""
        return self.S_u @ self.params["user_emb"], self.S_i @ self.params["item_emb"]

    def final_embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        E_u, E_i = self.entity_embeddings()
        if self.A_hat is not None:
            return lightgcn_propagate(self.A_hat, E_u, E_i, self.config.n_layers)
        return E_u, E_i

    def entity_biases(self) -> tuple[np.ndarray, np.ndarray, float]:
        return (self.S_u @ self.params["user_bias"], self.S_i @ self.params["item_bias"],
                float(self.params["global_bias"][0]))

    def backward(self, G_u: np.ndarray, G_i: np.ndarray) -> dict[str, np.ndarray]:
        """Map gradients w.r.t. final per-entity embeddings onto the tables."""
        if self.A_hat is not None:
            G_u, G_i = lightgcn_propagate(self.A_hat, G_u, G_i, self.config.n_layers)
        return {"user_emb": self.S_u.T @ G_u, "item_emb": self.S_i.T @ G_i}

    def backward_bias(self, g_bu: np.ndarray, g_bi: np.ndarray, g_b0: float) -> dict[str, np.ndarray]:
        return {"user_bias": self.S_u.T @ g_bu, "item_bias": self.S_i.T @ g_bi,
                "global_bias": np.array([g_b0])}

    def score_all(self) -> np.ndarray:
        """Dense ``n_users x n_items`` score matrix."""
        Z_u, Z_i = self.final_embeddings()
        return Z_u @ Z_i.T

    def predict_ctr(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        Z_u, Z_i = self.final_embeddings()
        b_u, b_i, b0 = self.entity_biases()
        return ctr_score(Z_u[users], Z_i[items], b_u[users], b_i[items], b0)

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            if self.params[k].shape != v.shape:
                raise DataError(f"parameter {k} has shape {v.shape}, expected {self.params[k].shape}")
            self.params[k] = np.array(v, dtype=np.float64)


# -- checkpoint format -----------------------------------------------------
#
# magic "GHCK" | u16 version | 16s backbone | u32 dim | u32 n_tables |
# n_tables x (16s name, u32 rows, u32 cols) | float32 LE row-major data

_MAGIC = b"GHCK"
_VERSION = 1
_TABLE_ORDER = ("user_emb", "item_emb", "user_bias", "item_bias", "global_bias")


def write_checkpoint(model: RecModel, path, sidecar: dict | None = None) -> None:
    path = Path(path)
    names = [n for n in _TABLE_ORDER if n in model.params]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sH16sII", _MAGIC, _VERSION, model.config.backbone.encode(),
                             model.config.dim, len(names)))
        for n in names:
            arr = model.params[n]
            rows = arr.shape[0]
            cols = arr.shape[1] if arr.ndim == 2 else 1
            fh.write(struct.pack("<16sII", n.encode(), rows, cols))
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f4").tobytes())
    meta = {"config": asdict(model.config), "seed": model.seed,
            "scheme": model.assignment.scheme}
    meta.update(sidecar or {})
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_checkpoint(path) -> tuple[str, int, dict[str, np.ndarray], dict]:
    """Return ``(backbone, dim, params, sidecar)``; params are float64."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.calcsize("<4sH16sII")
    magic, version, backbone, dim, n_tables = struct.unpack_from("<4sH16sII", raw, 0)
    if magic != _MAGIC or version != _VERSION:
        raise DataError(f"{path} is not a checkpoint this version can read")
    off = head
    shapes = []
    for _ in range(n_tables):
        name, rows, cols = struct.unpack_from("<16sII", raw, off)
        off += struct.calcsize("<16sII")
        shapes.append((name.rstrip(b"\0").decode(), rows, cols))
    params = {}
    for name, rows, cols in shapes:
        count = rows * cols
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += 4 * count
        params[name] = arr.reshape(rows, cols) if name.endswith("_emb") else arr.reshape(rows)
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes after weights")
    sidecar_path = path.with_suffix(".json")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8")) if sidecar_path.exists() else {}
    return backbone.rstrip(b"\0").decode(), dim, params, sidecar
