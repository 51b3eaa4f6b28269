"""Command-line entry point: ``mvagc {inspect,gradcheck,train,eval,cv}``.

Settings come from defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags (highest precedence).
"""
import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_model, save_model
from .errors import DomainError, MvagcError, ParseError
from .graph import Graph
from .model import init_model
from .training import (
    TrainConfig, cross_validate, evaluate, finite_difference_check, train, write_report,
)
from .tu import (
    dataset_statistics, encode, load_tu_dataset, stratified_kfold, stratified_subsample,
)

log = logging.getLogger("mvagc")

ALIASES = {"IMDB-B": "IMDB-BINARY", "IMDB-M": "IMDB-MULTI", "PTC-MR": "PTC_MR"}

RUN_DEFAULTS = {"dataset": "MUTAG", "data_root": "data", "out": "runs", "fold": 0,
                "parallel_folds": 1}

# applied when neither the config file nor a flag sets the key
DATASET_DEFAULTS = {
    "COLLAB": {"epochs": 30, "views_per_block": (4, 3, 3), "max_graphs": 500},
}

# flag name -> config key
FLAG_KEYS = {
    "dataset": "dataset", "data_root": "data_root", "out": "out", "seed": "seed",
    "lr": "learning_rate", "epochs": "epochs", "k_order": "k_order",
    "views": "views_per_block", "m_schedule": "m_schedule", "hidden": "hidden",
    "dropout": "dropout_rate", "alpha": "alpha", "sigma": "sigma",
    "squared_kernel": "squared_kernel", "lambda_mode": "lambda_mode",
    "degree_cap": "degree_cap", "encoding": "encoding", "folds": "folds",
    "max_graphs": "max_graphs",
    "parallel_folds": "parallel_folds", "laplacian_pool": "laplacian_pool", "fold": "fold",
}


class UsageError(MvagcError):
    pass


def _sigma(text):
    if text == "median":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'median', got {text!r}")


def _int_triple(text):
    try:
        vals = tuple(int(t) for t in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return vals


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key, value):
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    if key in ("views_per_block", "m_schedule"):
        return _int_triple(value) if isinstance(value, str) else tuple(value)
    if key in ("dataset", "data_root", "out"):
        return str(value)
    if key in ("fold", "parallel_folds"):
        return int(value)
    if key == "sigma":
        return value if value == "median" else float(value)
    kind = train_types.get(key)
    if kind is None:
        raise UsageError(f"unknown config key {key!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    if kind in (bool, "bool"):
        return _bool(value)
    return str(value)


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys may be config field names or flag names (``lr``, ``views``, ...).
    """
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        key = FLAG_KEYS.get(key, key)
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return out


def resolve_config(args):
    """Merge defaults, config file and flags; returns ``(run_settings, TrainConfig)``."""
    given = {}
    if getattr(args, "config", None):
        given.update(read_config_file(args.config))
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            given[key] = _coerce(key, val)
    name = given.get("dataset", RUN_DEFAULTS["dataset"])
    name = ALIASES.get(name, name)
    merged = {**RUN_DEFAULTS, **DATASET_DEFAULTS.get(name, {}), **given}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(merged) - train_keys - set(RUN_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    run = {k: merged[k] for k in RUN_DEFAULTS}
    cfg = TrainConfig(**{k: v for k, v in merged.items() if k in train_keys})
    run["dataset"] = ALIASES.get(run["dataset"], run["dataset"])
    return run, cfg


def _load_raw(run):
    name, root = run["dataset"], Path(run["data_root"])
    if not ((root / name).is_dir() or (root / f"{name}_A.txt").exists()):
        raise UsageError(f"unknown dataset {name!r}: nothing under {root}")
    return load_tu_dataset(root, name)


def _load_dataset(run, cfg):
    ds = encode(_load_raw(run), cfg.encoding, cfg.degree_cap)
    return stratified_subsample(ds, cfg.max_graphs, cfg.seed)


def format_statistics(stats):
    attr = stats["attribute_dim"] or "-"
    return (
        f"{stats['name']}: {stats['graphs']} graphs, {stats['classes']} classes, "
        f"mean vertices {stats['mean_vertices']:.2f}, mean edges {stats['mean_edges']:.2f}, "
        f"vertex labels {'yes' if stats['vertex_labels'] else 'no'}, attribute dim {attr}"
    )


def cmd_inspect(args):
    run, _ = resolve_config(args)
    stats = dataset_statistics(_load_raw(run))
    print(format_statistics(stats))
    return 0


def _random_graph(seed, n, d):
    rng = np.random.default_rng(seed)
    a = np.triu((rng.random((n, n)) < 0.4).astype(float), 1)
    a = a + a.T
    for i in range(n - 1):  # keep it connected along a path
        a[i, i + 1] = a[i + 1, i] = 1.0
    return Graph(a, rng.normal(size=(n, d)), int(rng.integers(2)))


def cmd_gradcheck(args):
    run, cfg = resolve_config(args)
    kwargs = cfg.model_kwargs()
    kwargs["dropout_rate"] = 0.0
    tol = args.tolerance
    if args.toy_linear:
        kwargs.update(k_order=1, views=(1, 1, 1), alpha=0.0)
        tol = args.tolerance if args.tolerance_given else 1e-6
    graphs = []
    try:
        ds = _load_dataset(run, cfg)
        d, q = ds.feature_dim, ds.num_classes
        graphs.append((f"{run['dataset']} graph #1", ds.graphs[0]))
    except UsageError:
        d, q = 7, 2
    graphs.insert(0, ("random graph", _random_graph(cfg.seed, 7, d)))
    model = init_model(d, q, seed=cfg.seed, **kwargs)
    ok = True
    for label, g in graphs:
        rep = finite_difference_check(
            model, g, step=args.step, tolerance=tol, max_coords=args.max_coords, seed=cfg.seed,
            resolution_floor=args.toy_linear,
        )
        print(f"== {label} (n={g.n}, tolerance {tol:g})")
        for line in rep.lines():
            print(line)
        ok &= rep.passed
    print("gradcheck: " + ("PASS" if ok else "FAIL"))
    return 0 if ok else 1


def cmd_train(args):
    run, cfg = resolve_config(args)
    ds = _load_dataset(run, cfg)
    plan = stratified_kfold(ds, cfg.folds, cfg.seed)
    model, rep = train(ds, plan, run["fold"], cfg)
    out = Path(run["out"])
    extra = {"dataset": run["dataset"], "fold": run["fold"], "config": cfg.to_dict(),
             "feature_dim": ds.feature_dim, "num_classes": ds.num_classes}
    ckpt = save_model(model, out / "model.npz", extra=extra)
    doc = dict(extra, test_accuracy=rep.test_accuracy, train_accuracy=rep.train_accuracy,
               train_loss_curve=rep.train_loss_curve, test_accuracy_curve=rep.test_accuracy_curve)
    (out / "train_report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"fold {run['fold']}: test accuracy {rep.test_accuracy:.4f}; checkpoint {ckpt}")
    return 0


def cmd_eval(args):
    run, cfg = resolve_config(args)
    try:
        model, extra = load_model(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return 1
    saved = extra.get("config", {})
    seed = saved.get("seed", cfg.seed)
    ds = encode(_load_raw(run), cfg.encoding, cfg.degree_cap)
    ds = stratified_subsample(ds, saved.get("max_graphs", cfg.max_graphs), seed)
    if ds.feature_dim != model.in_dim or ds.num_classes != model.num_classes:
        print(
            f"error: checkpoint expects (features={model.in_dim}, classes={model.num_classes}) "
            f"but {run['dataset']} has (features={ds.feature_dim}, classes={ds.num_classes})",
            file=sys.stderr,
        )
        return 1
    folds = saved.get("folds", cfg.folds)
    fold = extra.get("fold", run["fold"]) if args.fold is None else args.fold
    plan = stratified_kfold(ds, folds, seed)
    acc = evaluate(model, ds, plan.test_indices(fold))
    print(f"fold {fold}: accuracy {acc:.4f}")
    return 0


def cmd_cv(args):
    run, cfg = resolve_config(args)
    ds = _load_dataset(run, cfg)
    try:
        result = cross_validate(ds, cfg, parallel=run["parallel_folds"])
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    path = write_report(result, run["out"])
    print(result.table())
    print(f"report: {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mvagc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--dataset")
        p.add_argument("--data-root")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--k-order", type=int)
        p.add_argument("--views", type=_int_triple, help="views per block, e.g. 8,6,6")
        p.add_argument("--m-schedule", type=_int_triple, help="block widths, e.g. 80,128,256")
        p.add_argument("--hidden", type=int)
        p.add_argument("--dropout", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--sigma", type=_sigma, help="kernel width, or 'median'")
        p.add_argument("--squared-kernel", type=_bool)
        p.add_argument("--lambda-mode", choices=("eigh", "power", "bound"))
        p.add_argument("--degree-cap", type=int)
        p.add_argument("--encoding", choices=("auto", "label-onehot", "degree-onehot", "continuous"))
        p.add_argument("--folds", type=int)
        p.add_argument("--max-graphs", type=int, help="stratified subsample size (COLLAB: 500)")
        p.add_argument("--parallel-folds", type=int)
        p.add_argument("--laplacian-pool", choices=("dominant", "mean", "max"))
        return p

    common(sub.add_parser("inspect", help="print dataset statistics")).set_defaults(fn=cmd_inspect)

    g = common(sub.add_parser("gradcheck", help="finite-difference gradient check"))
    g.add_argument("--tolerance", type=float, default=None)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--max-coords", type=int, default=25)
    g.add_argument("--toy-linear", action="store_true", help="K=1, one view, alpha=0")
    g.set_defaults(fn=cmd_gradcheck)

    t = common(sub.add_parser("train", help="train one fold and write a checkpoint"))
    t.add_argument("--fold", type=int)
    t.set_defaults(fn=cmd_train)

    e = common(sub.add_parser("eval", help="evaluate a checkpoint on a fold"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--fold", type=int)
    e.set_defaults(fn=cmd_eval)

    common(sub.add_parser("cv", help="k-fold cross-validation")).set_defaults(fn=cmd_cv)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gradcheck":
        args.tolerance_given = args.tolerance is not None
        if args.tolerance is None:
            args.tolerance = 1e-4
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s"
    )
    try:
        return args.fn(args)
    except (UsageError, DomainError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, FileNotFoundError, MvagcError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
