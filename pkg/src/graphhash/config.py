"""Run configuration: a sectioned key-value file read with :mod:`configparser`.

Every key has a default, so an empty file is a valid config once
``[data] path`` is set. Example::

    [data]
    path = interactions.tsv
    mode = retrieval

    [scheme]
    name = graphhash
    resolution = 10

    [train]
    lr = 0.01
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .hashing import SCHEMES
from .models import ModelConfig
from .training import TrainConfig

GRAPH_SCHEMES = ("graphhash", "double_graphhash")
BUCKET_SCHEMES = ("random", "frequency", "double", "double_frequency")


@dataclass(frozen=True)
class DataSection:
    path: str = ""
    mode: str = "retrieval"
    binarize: bool = False
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0


@dataclass(frozen=True)
class SchemeSection:
    name: str = "graphhash"
    resolution: float = 1.0
    # 0 means "match the GraphHash table size" (computed at hash time)
    buckets_user: int = 0
    buckets_item: int = 0
    bits_user: int = 0
    bits_item: int = 0
    seed: int = 0


@dataclass(frozen=True)
class BenchSection:
    resolutions: tuple[float, ...] = (50.0, 100.0, 200.0, 400.0)
    gammas: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 5.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    schemes: tuple[str, ...] = ("graphhash", "double_frequency")
    gamma_resolution: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    scheme: SchemeSection = field(default_factory=SchemeSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_k: tuple[int, ...] = (20,)
    bins: tuple[float, ...] = (0.0, 20.0, 40.0, 60.0, 80.0, 100.0)
    output: str = "out"
    bench: BenchSection = field(default_factory=BenchSection)

    @property
    def ctr(self) -> bool:
        return self.data.mode == "ctr"

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every seed (split, hashing, initialisation, training)."""
        return replace(self, data=replace(self.data, seed=seed), scheme=replace(self.scheme, seed=seed),
                       train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["batch_size"] = self.train.batch_size
        return d

    def hash(self) -> str:
        """SHA-256 prefix over every setting that shapes artifacts.

        The output directory and the input path are left out so a moved run
        hashes the same; the input's content digest lives in the dataset
        manifest instead.
        """
        d = self.to_dict()
        d.pop("output")
        d["data"].pop("path")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(text.replace(",", " ").split())


def _section(parser: configparser.ConfigParser, name: str, cls, overrides: dict | None = None, base=None):
    """Build dataclass ``cls`` from a section, converting by field default type."""
    base = base if base is not None else cls()
    values = {}
    if parser.has_section(name):
        known = {f.name for f in fields(cls)}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"unknown key [{name}] {key}")
            current = getattr(base, key)
            try:
                if key in (overrides or {}):
                    values[key] = overrides[key](raw)
                elif isinstance(current, bool):
                    values[key] = parser.getboolean(name, key)
                elif isinstance(current, int):
                    values[key] = int(raw)
                elif isinstance(current, float):
                    values[key] = float(raw)
                else:
                    values[key] = raw.strip()
            except ValueError as exc:
                raise ConfigError(f"bad value for [{name}] {key}: {raw!r}") from exc
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def _batch(raw: str):
    raw = raw.strip().lower()
    return None if raw in ("full", "none", "") else int(raw)


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    known = {"data", "scheme", "model", "train", "eval", "output", "bench"}
    for s in parser.sections():
        if s not in known:
            raise ConfigError(f"unknown section [{s}]")

    data = _section(parser, "data", DataSection, {"split": _floats})
    if data.mode not in ("retrieval", "ctr"):
        raise ConfigError(f"[data] mode must be retrieval or ctr, got {data.mode!r}")
    if len(data.split) != 3 or any(r < 0 for r in data.split) or abs(sum(data.split) - 1) > 1e-9:
        raise ConfigError("[data] split needs three non-negative ratios summing to 1")
    if data.path and base_dir is not None and not Path(data.path).is_absolute():
        data = replace(data, path=str((base_dir / data.path).resolve()))

    scheme = _section(parser, "scheme", SchemeSection)
    if scheme.name not in SCHEMES:
        raise ConfigError(f"[scheme] name must be one of {', '.join(SCHEMES)}")
    if scheme.resolution <= 0:
        raise ConfigError("[scheme] resolution must be positive")

    # CTR defaults differ: logistic head, LogLoss, patience 5, minibatch 1024
    ctr = data.mode == "ctr"
    model_base = ModelConfig(backbone="ctr_logistic", loss="logloss") if ctr else ModelConfig()
    model = _section(parser, "model", ModelConfig, base=model_base)
    if ctr != (model.backbone == "ctr_logistic"):
        raise ConfigError("ctr mode requires backbone ctr_logistic and vice versa")

    train_base = TrainConfig(patience=5, batch_size=1024) if ctr else TrainConfig(
        batch_size=None if model.backbone == "mf" else 1024)
    train = _section(parser, "train", TrainConfig, {"batch_size": _batch}, base=train_base)

    eval_k, bins = (20,), RunConfig.bins
    if parser.has_section("eval"):
        for key, raw in parser.items("eval"):
            if key == "k":
                eval_k = _ints(raw)
            elif key == "bins":
                bins = _floats(raw)
            else:
                raise ConfigError(f"unknown key [eval] {key}")
    if not eval_k or min(eval_k) < 1:
        raise ConfigError("[eval] k must list positive integers")
    if len(bins) < 2 or list(bins) != sorted(bins):
        raise ConfigError("[eval] bins must be increasing percentile edges")
    train = replace(train, eval_k=eval_k[0])

    output = "out"
    if parser.has_section("output"):
        output = parser.get("output", "dir", fallback="out")
    bench = _section(parser, "bench", BenchSection,
                     {"resolutions": _floats, "gammas": _floats, "seeds": _ints, "schemes": _words})
    return RunConfig(data, scheme, model, train, eval_k, bins, output, bench)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` back to the file format (round-trips through parse_config)."""
    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        if isinstance(v, float):
            return repr(v)
        if v is None:
            return "full"
        return str(v).lower() if isinstance(v, bool) else str(v)

    lines = []
    for name, obj in (("data", cfg.data), ("scheme", cfg.scheme), ("model", cfg.model), ("train", cfg.train)):
        lines.append(f"[{name}]")
        lines += [f"{f.name} = {fmt(getattr(obj, f.name))}" for f in fields(obj)]
        lines.append("")
    lines += ["[eval]", f"k = {fmt(cfg.eval_k)}", f"bins = {fmt(cfg.bins)}", ""]
    lines += ["[output]", f"dir = {cfg.output}", ""]
    lines.append("[bench]")
    lines += [f"{f.name} = {fmt(getattr(cfg.bench, f.name))}" for f in fields(cfg.bench)]
    return "\n".join(lines) + "\n"
