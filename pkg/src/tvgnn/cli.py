"""Command-line entry point: ``tvgnn {gen,cluster,classify,eval,gradcheck}``.

Settings come from a flat ``key=value`` file (``--config``) overridden by
flags; ``--set key=value`` reaches any setting without a dedicated flag.
Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
3 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields

import numpy as np

from . import datasets, metrics
from .errors import ConfigError, NonFiniteLoss, TvgnnError
from .gradcheck import TOLERANCE, run_suite
from .graph import cycle_order, gen_grid, gen_ring, gen_sbm
from .models import (
    ModelConfig, TrainConfig, cluster_preset, mutag_preset, save_checkpoint,
    stratified_kfold, train_classifier, train_cluster,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("tvgnn")


# -- configuration -----------------------------------------------------------

def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _optional(conv):
    def parse(text):
        if text is None or str(text).strip().lower() in ("none", ""):
            return None
        return conv(text)
    return parse


def _field_converters(cls, optional=None):
    out = {}
    for f in fields(cls):
        if f.name == "model":
            continue
        if f.name in (optional or {}):
            out[f.name] = _optional(optional[f.name])
            continue
        default = f.default
        if isinstance(default, bool):
            out[f.name] = _bool
        elif isinstance(default, int):
            out[f.name] = int
        elif isinstance(default, float):
            out[f.name] = float
        else:
            out[f.name] = str
    return out


TRAIN_KEYS = _field_converters(TrainConfig, {"rho": float})
MODEL_KEYS = _field_converters(ModelConfig, {"k_pool": int})
COMMON_KEYS = {"out": str, "seeds": _int_list, "jobs": int}
CLUSTER_KEYS = {
    **COMMON_KEYS, **TRAIN_KEYS, **MODEL_KEYS,
    "k": int, "edges": str, "features": str, "labels": str,
    "kind": str, "n": int, "rows": int, "cols": int, "sizes": _int_list,
    "p_in": float, "p_out": float, "graph_seed": int,
}
CLASSIFY_KEYS = {
    **COMMON_KEYS, **TRAIN_KEYS, **MODEL_KEYS,
    "data": str, "folds": int, "fold_seed": int, "fold": int,
}


def read_config_file(path) -> dict:
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = text.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_config(schema: dict, file_values: dict, flag_values: dict) -> dict:
    """Merge file values and flags (flags win), rejecting unknown keys."""
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    unknown = sorted(set(merged) - set(schema))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    out = {}
    for key, value in merged.items():
        try:
            out[key] = schema[key](value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return out


def _flag_values(args, extra_sets) -> dict:
    values = {k: v for k, v in vars(args).items()
              if k not in ("command", "config", "set", "seed", "func") and v is not None}
    if getattr(args, "seed", None) is not None:
        values["seeds"] = [args.seed]
    for item in extra_sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _load_config(args, schema):
    file_values = read_config_file(args.config) if args.config else {}
    return resolve_config(schema, file_values, _flag_values(args, args.set))


def _train_config(base: TrainConfig, conf: dict, seed: int) -> TrainConfig:
    cfg = TrainConfig.from_dict({**_asdict(base), "seed": seed})
    for key, value in conf.items():
        if key in TRAIN_KEYS:
            setattr(cfg, key, value)
        elif key in MODEL_KEYS:
            setattr(cfg.model, key, value)
    cfg.seed = seed
    try:
        cfg.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _asdict(cfg):
    from dataclasses import asdict
    return asdict(cfg)


# -- gen ---------------------------------------------------------------------

def make_graph(conf: dict):
    kind = conf.get("kind")
    if kind == "ring":
        return gen_ring(_need(conf, "n"))
    if kind == "grid":
        return gen_grid(_need(conf, "rows"), _need(conf, "cols"))
    if kind == "sbm":
        return gen_sbm(_need(conf, "sizes"), _need(conf, "p_in"), _need(conf, "p_out"),
                       seed=conf.get("graph_seed", 0))
    raise ConfigError(f"unknown generator kind {kind!r}; choose ring, grid or sbm")


def _need(conf, key):
    if key not in conf:
        raise ConfigError(f"missing required setting {key!r}")
    return conf[key]


def cmd_gen(args) -> int:
    conf = {"kind": args.kind, "n": args.n, "rows": args.rows, "cols": args.cols,
            "sizes": _int_list(args.sizes) if args.sizes else None,
            "p_in": args.p_in, "p_out": args.p_out, "graph_seed": args.seed or 0}
    conf = {k: v for k, v in conf.items() if v is not None}
    g = make_graph(conf)
    paths = datasets.write_vertex_dataset(g, args.out)
    meta = dict(conf, n_vertices=g.n_vertices, n_edges=g.n_edges)
    metrics.write_json(meta, os.path.join(args.out, "meta.json"))
    for p in paths:
        print(p)
    print(f"{g.n_vertices} vertices, {g.n_edges} edges")
    return EXIT_OK


# -- cluster -----------------------------------------------------------------

def _cluster_graph(conf):
    if "edges" in conf or "features" in conf:
        return datasets.load_vertex_dataset(_need(conf, "edges"), _need(conf, "features"),
                                            conf.get("labels"))
    if "kind" in conf:
        return make_graph(conf)
    raise ConfigError("give either edges/features paths or a generator kind")


def run_cluster_seed(g, k: int, cfg: TrainConfig, outdir: str) -> dict:
    """Train one seed and write its artifacts; return the metrics dict."""
    os.makedirs(outdir, exist_ok=True)
    model, s, history = train_cluster(g, k, cfg)
    part = metrics.argmax_partition(s)
    final = history[-1]
    cut = metrics.cut_value(g, part, k)
    sizes, entropy = metrics.cluster_balance(part, k)
    out = {
        "seed": cfg.seed,
        "k": k,
        "epochs": cfg.epochs,
        "loss": cfg.loss,
        "loss_total": final["total"],
        "loss_components": {key: v for key, v in final.items() if key not in ("epoch", "total")},
        "cut_ratio": cut.ratio,
        "cuts": cut.cuts,
        "cluster_sizes": sizes,
        "balance_entropy": entropy,
        "n_clusters": int(np.count_nonzero(sizes)),
        "mean_max_assignment": float(s.max(axis=1).mean()),
    }
    if g.vertex_labels is not None:
        out["nmi"] = metrics.nmi(g.vertex_labels, part)
        out["acc"] = metrics.accuracy(g.vertex_labels, part)
    ring = cycle_order(g)
    if ring is not None:
        out["contiguous"] = metrics.is_contiguous_ring(part, ring)

    rows = [[i, int(part[i]), *s[i]] for i in range(g.n_vertices)]
    metrics.write_csv(rows, os.path.join(outdir, "assignments.csv"),
                      ["vertex", "cluster"] + [f"s{j}" for j in range(k)])
    metrics.write_json(out, os.path.join(outdir, "metrics.json"))
    order = g.vertex_labels if g.vertex_labels is not None else part
    metrics.write_pgm(metrics.sharpness_matrix(s, order), os.path.join(outdir, "sharpness.pgm"))
    if ring is not None:
        vertices = ring
    else:
        vertices = np.argsort(s.max(axis=1), kind="stable")
    prof = metrics.max_assignment_profile(s, vertices)
    metrics.write_csv([[p, int(v), prof[p]] for p, v in enumerate(vertices)],
                      os.path.join(outdir, "profile.csv"),
                      ["position", "vertex", "max_assignment"])
    comp_names = list(history[0].keys())
    metrics.write_csv([[h[c] for c in comp_names] for h in history],
                      os.path.join(outdir, "history.csv"), comp_names)
    save_checkpoint(os.path.join(outdir, "checkpoint.json"), model, cfg,
                    {"kind": "cluster", "f_in": g.n_features, "k": k})
    return out


def _run_cluster_job(job):
    g, k, cfg, outdir = job
    return run_cluster_seed(g, k, cfg, outdir)


SUMMARY_KEYS = ("nmi", "acc", "loss_total", "cut_ratio", "balance_entropy",
                "n_clusters", "mean_max_assignment")


def summarize(per_seed: list, keys=SUMMARY_KEYS) -> dict:
    """Mean and population standard deviation of every finite numeric key."""
    mean, std, values = {}, {}, {}
    for key in keys:
        vals = [m[key] for m in per_seed if key in m]
        if not vals or any(not isinstance(v, (int, float)) or isinstance(v, bool)
                           for v in vals):
            continue
        arr = np.array(vals, dtype=np.float64)
        values[key] = vals
        if np.all(np.isfinite(arr)):
            mean[key] = float(np.mean(arr))
            std[key] = float(np.std(arr))
    return {"values": values, "mean": mean, "std": std}


def _map_jobs(fn, jobs, n_jobs):
    if n_jobs and n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_cluster(args) -> int:
    conf = _load_config(args, CLUSTER_KEYS)
    k = _need(conf, "k")
    out = _need(conf, "out")
    g = _cluster_graph(conf)
    seeds = conf.get("seeds", [0])
    jobs = []
    for seed in seeds:
        cfg = _train_config(cluster_preset(), conf, seed)
        if cfg.loss != "tvgnn" and "conv" not in conf:
            cfg.model.conv = "gcn"
        jobs.append((g, k, cfg, os.path.join(out, f"seed_{seed}")))
    _map_jobs(_run_cluster_job, jobs, conf.get("jobs", 1))
    # summary statistics are recomputed from the files just written
    per_seed = [_read_json(os.path.join(j[3], "metrics.json")) for j in jobs]
    summary = {"seeds": seeds, "k": k, **summarize(per_seed)}
    if any("contiguous" in m for m in per_seed):
        summary["contiguous"] = [m.get("contiguous") for m in per_seed]
    metrics.write_json(summary, os.path.join(out, "summary.json"))
    _print_summary(summary)
    return EXIT_OK


def _read_json(path):
    import json
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _print_summary(summary):
    for key, mean in summary["mean"].items():
        print(f"{key:22s} {mean:.4f} +- {summary['std'][key]:.4f}")


# -- classify ----------------------------------------------------------------

def _run_classify_job(job):
    coll, cfg, split, fold = job
    _, met = train_classifier(coll, cfg, split)
    return {"fold": fold, "seed": cfg.seed, **met}


def cmd_classify(args) -> int:
    conf = _load_config(args, CLASSIFY_KEYS)
    out = _need(conf, "out")
    coll = datasets.load_graph_collection(_need(conf, "data"))
    folds = stratified_kfold(coll.labels, conf.get("folds", 5), conf.get("fold_seed", 0))
    seeds = conf.get("seeds", [0, 1, 2])
    only = conf.get("fold")
    if only is not None and not 0 <= only < len(folds):
        raise ConfigError(f"fold {only} out of range for {len(folds)} folds")
    jobs = []
    for f, split in enumerate(folds):
        if only is not None and f != only:
            continue
        for seed in seeds:
            jobs.append((coll, _train_config(mutag_preset(), conf, seed), split, f))
    results = _map_jobs(_run_classify_job, jobs, conf.get("jobs", 1))
    os.makedirs(out, exist_ok=True)
    header = ["fold", "seed", "accuracy", "best_epoch", "epochs"]
    rows = [[r["fold"], r["seed"], r["test_accuracy"], r["best_epoch"], r["epochs"]]
            for r in results]
    metrics.write_csv(rows, os.path.join(out, "accuracy.csv"), header)
    accs = np.array([r["test_accuracy"] for r in results])
    summary = {
        "loss": jobs[0][1].loss,
        "folds": len(folds),
        "seeds": seeds,
        "runs": len(results),
        "mean": {"accuracy": float(np.mean(accs))},
        "std": {"accuracy": float(np.std(accs))},
    }
    metrics.write_json(summary, os.path.join(out, "summary.json"))
    _print_summary(summary)
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def read_assignment_csv(path) -> np.ndarray:
    """Cluster column of an ``assignments.csv`` (or a bare one-int-per-line file)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if lines and lines[0].startswith("vertex"):
        return np.array([int(ln.split(",")[1]) for ln in lines[1:]], dtype=np.int64)
    return np.array([int(ln.split(",")[0]) for ln in lines], dtype=np.int64)


def cmd_eval(args) -> int:
    part = read_assignment_csv(args.assignments)
    labels = datasets.read_labels(args.labels)
    k = args.k or int(max(part.max(), labels.max())) + 1
    report = {
        "nmi": metrics.nmi(labels, part),
        "acc": metrics.accuracy(labels, part),
    }
    sizes, entropy = metrics.cluster_balance(part, k)
    report["cluster_sizes"] = sizes
    report["balance_entropy"] = entropy
    if args.edges:
        edges, weights = datasets.read_edge_list(args.edges)
        from .graph import Graph
        g = Graph.from_edges(len(part), edges, np.zeros((len(part), 1)), weights)
        report["cut_ratio"] = metrics.cut_value(g, part, k).ratio
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        metrics.write_json(report, os.path.join(args.out, "eval.json"))
    for key in ("nmi", "acc", "balance_entropy", "cut_ratio"):
        if key in report:
            print(f"{key:16s} {report[key]:.6f}")
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------

def cmd_gradcheck(args, primitives=None) -> int:
    report = run_suite(h=args.h, points=args.points, seed=args.seed or 0,
                       primitives=primitives)
    print(f"step h = {args.h:g}, {args.points} points per op")
    failed = []
    for name, err in report.items():
        ok = err <= TOLERANCE
        print(f"{name:24s} {err:.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_CHECK
    return EXIT_OK


# -- entry -------------------------------------------------------------------

def _common(p, seeds=True):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--out", help="output directory")
    if seeds:
        p.add_argument("--seed", type=int, help="single training seed")
        p.add_argument("--seeds", help="comma-separated training seeds")
        p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any setting (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvgnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic graph")
    p.add_argument("--kind", required=True, choices=["ring", "grid", "sbm"])
    p.add_argument("--n", type=int)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--sizes")
    p.add_argument("--p-in", type=float)
    p.add_argument("--p-out", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("cluster", help="unsupervised vertex clustering")
    _common(p)
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--edges")
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--kind", choices=["ring", "grid", "sbm"])
    p.add_argument("--n", type=int)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--sizes")
    p.add_argument("--p-in", type=float)
    p.add_argument("--p-out", type=float)
    p.add_argument("--graph-seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=["tvgnn", "mincut", "dmon"])
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("classify", help="graph classification with pooling")
    _common(p)
    p.add_argument("--data", help="JSON-lines graph collection")
    p.add_argument("--folds", type=int)
    p.add_argument("--fold-seed", type=int)
    p.add_argument("--fold", type=int, help="run only this fold index")
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss", choices=["tvgnn", "mincut", "dmon"])
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="score saved assignments against labels")
    p.add_argument("--assignments", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--edges")
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _setup_logging():
    level = os.environ.get("TVGNN_LOG", "quiet").lower()
    levels = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"TVGNN_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def main(argv=None, primitives=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        _setup_logging()
        if args.command == "gradcheck":
            return cmd_gradcheck(args, primitives)
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TvgnnError, ValueError, KeyError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
