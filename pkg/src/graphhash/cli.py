"""``graphhash`` command line: ingest -> cluster -> hash -> train -> eval.

Every stage reads its inputs from and writes its outputs to the run's
output directory, so stages can be re-run one at a time. ``run`` chains
them all; ``bench`` runs the resolution and gamma sweeps.

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .clustering import louvain, modularity, read_partition, write_partition
from .config import GRAPH_SCHEMES, RunConfig, dump_config, load_config
from .data import TRAIN, prepare, read_dataset, write_dataset
from .errors import ConfigError, DataError, GraphHashError
from .evaluation import ctr_report, retrieval_report, write_report
from .experiments import build_assignment, gamma_sweep, resolution_sweep
from .graph import build_graph
from .hashing import collision_stats, read_assignment, write_assignment
from .models import ModelConfig, RecModel, read_checkpoint, write_checkpoint
from .training import train, write_history

MANIFEST = "run_manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _history_digest(path: Path) -> str:
    """Digest of history.csv without the wall-clock column."""
    h = hashlib.sha256()
    with open(path, encoding="utf-8") as fh:
        for row in csv.reader(fh):
            h.update(("\t".join(row[:3]) + "\n").encode())
    return h.hexdigest()


class Run:
    """A resolved config plus its output directory and manifest."""

    def __init__(self, cfg: RunConfig, threads: int = 0):
        self.cfg = cfg
        self.threads = threads
        self.out = Path(cfg.output)
        self.hash = cfg.hash()

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DataError(f"{p} is missing; run `graphhash {stage}` first")
        return p

    def record(self, stage: str, artifacts: list[str]) -> None:
        """Add artifact digests for ``stage`` to the run manifest."""
        self.out.mkdir(parents=True, exist_ok=True)
        mpath = self.path(MANIFEST)
        manifest = json.loads(mpath.read_text(encoding="utf-8")) if mpath.exists() else {}
        if manifest.get("config_hash") != self.hash:
            manifest = {}
        cfg = self.cfg
        manifest.update({
            "version": __version__,
            "config_hash": self.hash,
            "config": {k: v for k, v in cfg.to_dict().items() if k != "output"},
            "seeds": {"split": cfg.data.seed, "scheme": cfg.scheme.seed, "train": cfg.train.seed},
        })
        stages = manifest.setdefault("stages", {})
        digests = {}
        for name in artifacts:
            p = self.path(name)
            if name == "history.csv":
                digests[name] = {"sha256_without_elapsed_s": _history_digest(p)}
            else:
                digests[name] = {"sha256": sha256_file(p)}
        stages[stage] = digests
        with open(mpath, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- stages ----------------------------------------------------------------

def cmd_ingest(run: Run) -> dict:
    cfg = run.cfg
    if not cfg.data.path:
        raise ConfigError("[data] path is not set")
    src = Path(cfg.data.path)
    if not src.exists():
        raise DataError(f"input file {src} does not exist")
    ds, report = prepare(src, mode=cfg.data.mode, ratios=cfg.data.split, seed=cfg.data.seed,
                         binarize=cfg.data.binarize)
    if ds.mask(TRAIN).sum() == 0:
        raise DataError("train split is empty")
    extra = {"config_hash": run.hash, "input_sha256": sha256_file(src),
             "split_ratios": list(cfg.data.split), "transductive": report}
    manifest = write_dataset(ds, run.path("dataset"), extra)
    run.record("ingest", [f"dataset/{n}" for n in ("manifest.json", "train.tsv", "val.tsv", "test.tsv",
                                                    "user_map.tsv", "item_map.tsv")])
    return manifest


def _dataset(run: Run):
    run.require("dataset/manifest.json", "ingest")
    ds = read_dataset(run.path("dataset"))
    return ds, build_graph(ds)


def cmd_cluster(run: Run) -> dict:
    ds, g = _dataset(run)
    if g.m == 0:
        raise DataError("train graph has no edges")
    p = louvain(g, run.cfg.scheme.resolution)
    q = modularity(g, p)
    write_partition(p, run.path("partition.tsv"), q=q, extra={"config_hash": run.hash})
    run.record("cluster", ["partition.tsv"])
    return {"n_clusters": p.n_clusters, "Q": q}


def cmd_hash(run: Run) -> dict:
    ds, g = _dataset(run)
    sch = run.cfg.scheme
    needs_partition = sch.name in GRAPH_SCHEMES or (
        sch.name not in ("full",) and not (sch.buckets_user and sch.buckets_item))
    part = None
    if needs_partition:
        part, header = read_partition(run.require("partition.tsv", "cluster"))
        if header.get("config_hash") != run.hash:
            raise DataError("partition.tsv was produced under a different config; re-run `graphhash cluster`")
    a = build_assignment(sch, ds, g, part)
    write_assignment(a, run.path("assignment.tsv"), extra={"config_hash": run.hash})
    stats = collision_stats(a)
    stats["config_hash"] = run.hash
    stats["n_params"] = a.n_params(run.cfg.model.dim)
    with open(run.path("collision_stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.record("hash", ["assignment.tsv", "collision_stats.json"])
    return stats


def _assignment(run: Run):
    path = run.require("assignment.tsv", "hash")
    a, header = read_assignment(path)
    if header.get("config_hash") != run.hash:
        raise DataError("assignment.tsv was produced under a different config; re-run `graphhash hash`")
    return a, sha256_file(path)


def cmd_train(run: Run, log=None) -> dict:
    ds, g = _dataset(run)
    a, a_sha = _assignment(run)
    if a.n_users != ds.n_users or a.n_items != ds.n_items:
        raise DataError("assignment does not cover the dataset's entities")
    cfg = run.cfg
    model = RecModel(cfg.model, a, g, seed=cfg.train.seed)
    res = train(model, ds, cfg.train, graph=g, log=log)
    write_checkpoint(model, run.path("checkpoint.bin"),
                     {"config_hash": run.hash, "assignment_sha256": a_sha,
                      "best_epoch": res.best_epoch, "best_val_metric": res.best_metric})
    write_history(res.history, run.path("history.csv"))
    run.record("train", ["checkpoint.bin", "checkpoint.json", "history.csv"])
    return {"best_epoch": res.best_epoch, "best_val_metric": res.best_metric, "epochs": len(res.history)}


def load_model(run: Run):
    """Rebuild the trained model, refusing checkpoint/assignment mismatches."""
    ds, g = _dataset(run)
    a, a_sha = _assignment(run)
    ck = run.require("checkpoint.bin", "train")
    backbone, dim, params, side = read_checkpoint(ck)
    if side.get("assignment_sha256") != a_sha:
        raise DataError("checkpoint was trained against a different assignment.tsv")
    if side.get("config_hash") != run.hash:
        raise DataError("checkpoint was produced under a different config")
    mcfg = ModelConfig(**side["config"])
    if mcfg.backbone != backbone or mcfg.dim != dim:
        raise DataError("checkpoint header disagrees with its sidecar")
    model = RecModel(mcfg, a, g, seed=side.get("seed", 0))
    for name, arr in params.items():
        if name not in model.params or model.params[name].shape != arr.shape:
            raise DataError(f"checkpoint table {name} does not fit the assignment")
    model.load_params(params)
    return model, ds, g


def cmd_eval(run: Run) -> dict:
    model, ds, g = load_model(run)
    cfg = run.cfg
    if cfg.ctr:
        report = ctr_report(model, ds, cfg.bins)
    else:
        report = {}
        for k in cfg.eval_k:
            r = retrieval_report(model, ds, g, k=k, bins=cfg.bins, threads=run.threads)
            if not report:
                report = r
            else:
                report[f"recall_at_{k}"] = r[f"recall_at_{k}"]
                report[f"ndcg_at_{k}"] = r[f"ndcg_at_{k}"]
                for b, entry in r["subgroups"].items():
                    report["subgroups"].setdefault(b, {}).update(entry)
    report["config_hash"] = run.hash
    report["scheme"] = model.assignment.scheme
    write_report(report, run.path("metrics.json"), run.path("metrics.csv"),
                 model.assignment.scheme, cfg.model.backbone)
    run.record("eval", ["metrics.json", "metrics.csv"])
    return report


def cmd_run(run: Run, log=None) -> dict:
    out = {"ingest": cmd_ingest(run)}
    sch = run.cfg.scheme
    if sch.name in GRAPH_SCHEMES or (sch.name != "full" and not (sch.buckets_user and sch.buckets_item)):
        out["cluster"] = _staged("cluster", cmd_cluster, run)
    out["hash"] = _staged("hash", cmd_hash, run)
    out["train"] = _staged("train", cmd_train, run, log)
    out["eval"] = _staged("eval", cmd_eval, run)
    return out


def _write_rows(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def cmd_bench(run: Run, sweep: str = "both", log=None) -> dict:
    cfg = run.cfg
    if not cfg.data.path or not Path(cfg.data.path).exists():
        raise DataError(f"input file {cfg.data.path!r} does not exist")
    datasets = {s: prepare(cfg.data.path, cfg.data.mode, cfg.data.split, s, cfg.data.binarize)[0]
                for s in cfg.bench.seeds}
    run.out.mkdir(parents=True, exist_ok=True)
    out, written = {}, []
    if sweep in ("resolution", "both"):
        rows = resolution_sweep(cfg, datasets, log)
        _write_rows(run.path("bench_resolution.csv"), rows,
                    ["scheme", "resolution", "n_clusters", "user_rows", "item_rows", "n_params",
                     "metric", "mean", "std"])
        out["resolution"] = rows
        written.append("bench_resolution.csv")
    if sweep in ("gamma", "both"):
        if cfg.ctr:
            raise ConfigError("the gamma sweep applies to retrieval (DirectAU) only")
        rows = gamma_sweep(cfg, datasets, log)
        _write_rows(run.path("bench_gamma.csv"), rows, ["scheme", "gamma", "n_params", "metric", "mean", "std"])
        out["gamma"] = rows
        written.append("bench_gamma.csv")
    run.record("bench", written)
    return out


# -- entry point -----------------------------------------------------------

class StageError(Exception):
    def __init__(self, stage: str, error: GraphHashError | ValueError):
        self.stage = stage
        self.error = error
        super().__init__(f"stage {stage}: {error}")


def _staged(stage: str, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except (GraphHashError, ValueError) as exc:
        raise StageError(stage, exc) from exc


def _exit_code(exc) -> int:
    return getattr(exc, "exit_code", 2 if isinstance(exc, ValueError) else 1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphhash", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="run configuration file")
    common.add_argument("--seed", type=int, default=None, metavar="N", help="override every seed")
    common.add_argument("--threads", type=int, default=0, metavar="N",
                        help="evaluation worker threads (0 = single-thread reference)")
    common.add_argument("--out", default=None, metavar="DIR", help="override [output] dir")
    common.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="load, split and re-index interactions")
    sub.add_parser("cluster", parents=[common], help="Louvain partition of the train graph")
    sub.add_parser("hash", parents=[common], help="bucket assignment and collision statistics")
    sub.add_parser("train", parents=[common], help="train the configured model")
    sub.add_parser("eval", parents=[common], help="test-split metrics and subgroup report")
    sub.add_parser("run", parents=[common], help="all stages in order")
    b = sub.add_parser("bench", parents=[common], help="resolution and gamma sweeps")
    b.add_argument("--sweep", choices=("resolution", "gamma", "both"), default="both")
    sub.add_parser("show-config", parents=[common], help="print the fully resolved config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.command

    def say(msg):
        if not args.quiet:
            print(msg, file=sys.stderr)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out is not None:
            cfg = replace(cfg, output=args.out)
        if args.threads < 0:
            raise ConfigError("--threads must be >= 0")
        run = Run(cfg, args.threads)
        epoch_log = (lambda h: say(f"epoch {h['epoch']} loss={h['train_loss']:.5f} "
                                   f"val={h['val_metric']:.5f}"))
        if stage == "show-config":
            sys.stdout.write(dump_config(cfg))
            print(f"# config_hash={run.hash}")
            return 0
        handlers = {
            "ingest": lambda: cmd_ingest(run),
            "cluster": lambda: cmd_cluster(run),
            "hash": lambda: cmd_hash(run),
            "train": lambda: cmd_train(run, epoch_log),
            "eval": lambda: cmd_eval(run),
            "run": lambda: cmd_run(run, epoch_log),
            "bench": lambda: cmd_bench(run, args.sweep, say),
        }
        result = _staged(stage, handlers[stage])
    except StageError as exc:
        print(f"graphhash: {exc.stage} failed: {exc.error}", file=sys.stderr)
        return _exit_code(exc.error)
    except GraphHashError as exc:
        print(f"graphhash: {stage} failed: {exc}", file=sys.stderr)
        return exc.exit_code
    say(_summary(stage, result))
    return 0


def _summary(stage: str, result) -> str:
    if stage == "eval":
        keys = [k for k in result if k.startswith(("recall", "ndcg")) or k in ("logloss", "auc", "n_params")]
        return "eval: " + " ".join(f"{k}={result[k]:.4f}" if isinstance(result[k], float) else f"{k}={result[k]}"
                                   for k in keys)
    if stage == "run":
        return _summary("eval", result["eval"])
    if stage == "bench":
        return "bench: " + ", ".join(f"{k} ({len(v)} rows)" for k, v in result.items())
    return f"{stage}: " + json.dumps({k: v for k, v in result.items() if not isinstance(v, (dict, list))},
                                     sort_keys=True)


if __name__ == "__main__":
    sys.exit(main())
