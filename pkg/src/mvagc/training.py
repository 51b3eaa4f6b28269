"""Gradients, finite-difference validation, SGD training and k-fold evaluation."""
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import DomainError, NonFiniteError
from .model import backward, cross_entropy, forward, init_model, routing_signature, same_routing
from .spectral import check_sigma
from .tu import ENCODINGS, stratified_kfold, stratified_subsample

log = logging.getLogger(__name__)

REPORT_SCHEMA = "mvagc.cv-report/1"


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    epochs: int = 80
    seed: int = 0
    k_order: int = 6
    views_per_block: tuple = (8, 6, 6)
    m_schedule: tuple = (80, 128, 256)
    hidden: int = 128
    dropout_rate: float = 0.0  # 0.5 ahead of the max readout collapses MUTAG to one class
    alpha: float = 1.0
    sigma: float = 1.0  # or "median"
    squared_kernel: bool = False
    lambda_mode: str = "eigh"
    laplacian_pool: str = "dominant"
    degree_cap: int = None  # None: per-dataset default (50, COLLAB 30)
    encoding: str = "auto"
    folds: int = 10
    max_graphs: int = None  # stratified subsample size; None keeps every graph

    def __post_init__(self):
        self.views_per_block = tuple(int(v) for v in self.views_per_block)
        self.m_schedule = tuple(int(m) for m in self.m_schedule)
        if self.learning_rate <= 0:
            raise DomainError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise DomainError(f"epochs must be >= 1, got {self.epochs}")
        if self.k_order < 1:
            raise DomainError(f"k_order must be >= 1, got {self.k_order}")
        if any(v < 1 for v in self.views_per_block):
            raise DomainError(f"every block needs at least one view: {self.views_per_block}")
        check_sigma(self.sigma)
        if self.max_graphs is not None and self.max_graphs < 1:
            raise DomainError(f"max_graphs must be >= 1, got {self.max_graphs}")
        if self.encoding not in ENCODINGS + ("auto",):
            raise DomainError(f"encoding must be 'auto' or one of {ENCODINGS}, got {self.encoding!r}")

    def model_kwargs(self):
        return dict(
            k_order=self.k_order, views=self.views_per_block, m_schedule=self.m_schedule,
            hidden=self.hidden, dropout_rate=self.dropout_rate, alpha=self.alpha,
            sigma=self.sigma, squared_kernel=self.squared_kernel,
            lambda_mode=self.lambda_mode, laplacian_pool=self.laplacian_pool,
        )

    def to_dict(self):
        d = asdict(self)
        d["views_per_block"] = list(self.views_per_block)
        d["m_schedule"] = list(self.m_schedule)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FoldReport:
    fold_index: int
    test_accuracy: float
    train_loss_curve: list
    wall_time: float = 0.0
    test_accuracy_curve: list = field(default_factory=list)
    best_test_accuracy: float = 0.0
    best_epoch: int = 0
    train_accuracy: float = 0.0


# --- gradients ----------------------------------------------------------------


def _first_nonfinite(fwd):
    for b, cache in enumerate(fwd.cache["blocks"]):
        vc = cache["mcache"]["vcache"]
        checks = [
            ("metric", vc["m"]), ("distances", vc["dist"]), ("similarity", vc["s"]),
            ("chebyshev terms", cache["mcache"]["terms"]), ("batch norm", cache["xhat"]),
            ("linear", cache["pre"]),
        ]
        for name, arr in checks:
            if not np.all(np.isfinite(arr)):
                return f"block {b} {name}"
    for name in ("r", "h", "logits"):
        if not np.all(np.isfinite(fwd.cache[name])):
            return name
    return "probabilities"


def compute_gradients(model, graph, rng=None, training=True):
    """Loss and exact gradients for one graph.

    Returns ``(loss, grads)``; ``grads`` is keyed like ``model.parameters()``.
    Dropout is active only when ``training`` is true and an rng is given.
    """
    loss, grads, _ = _loss_and_grads(model, graph, rng, training)
    return loss, grads


def _loss_and_grads(model, graph, rng=None, training=True, lambdas=None):
    fwd = forward(model, graph, training=training and rng is not None, rng=rng, lambdas=lambdas)
    if not np.all(np.isfinite(fwd.probs)):
        raise NonFiniteError(f"non-finite forward pass; first bad value in {_first_nonfinite(fwd)}")
    loss = cross_entropy(fwd.probs, graph.label)
    grads = backward(model, fwd, graph.label)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    return loss, grads, fwd


def relative_error(analytic, numeric):
    a = np.asarray(analytic).ravel()
    f = np.asarray(numeric).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(f))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - f) / scale)


@dataclass
class GradCheckReport:
    """Per-group relative errors.

    A group also passes when its absolute disagreement is below
    ``noise_floor``, the per-coordinate resolution of a central difference
    (round-off in the loss divided by the step). That only matters for
    groups whose true gradient is itself at round-off scale.
    """

    errors: dict
    tolerance: float
    coords_checked: dict
    abs_errors: dict = field(default_factory=dict)
    noise_floor: float = 0.0
    kinks_skipped: dict = field(default_factory=dict)
    step_refined: dict = field(default_factory=dict)

    def ok(self, name):
        if self.coords_checked[name] == 0 and self.kinks_skipped.get(name, 0) > 0:
            return False
        if self.errors[name] < self.tolerance:
            return True
        n = self.coords_checked[name]
        return self.abs_errors.get(name, np.inf) <= self.noise_floor * np.sqrt(n)

    @property
    def failures(self):
        return {k: v for k, v in self.errors.items() if not self.ok(k)}

    @property
    def passed(self):
        return not self.failures

    def lines(self):
        out = []
        for name, err in self.errors.items():
            status = "PASS" if self.ok(name) else "FAIL"
            note = "" if err < self.tolerance or status == "FAIL" else " (below fd resolution)"
            out.append(
                f"{status} {name:<16} rel_err={err:.3e} abs_err={self.abs_errors.get(name, 0):.1e}"
                f" coords={self.coords_checked[name]}"
                f" refined={self.step_refined.get(name, 0)}"
                f" kinks_skipped={self.kinks_skipped.get(name, 0)}{note}"
            )
        return out


def finite_difference_check(
    model, graph, step=1e-5, tolerance=1e-4, max_coords=500, seed=0, resolution_floor=False,
    smooth_only=True,
):
    """Compare analytic gradients with central differences, per parameter group.

    The largest-eigenvalue estimates and any data-derived kernel widths are
    frozen at the values of the unperturbed pass, matching the stop-gradient
    used by backprop. Groups
    larger than ``max_coords`` are checked on a seeded random subsample.
    With ``smooth_only`` a coordinate whose +/- step changes any routing
    decision (a ReLU mask, a max winner) is retried with steps down to
    ``step / 1000`` and skipped if it never settles on one smooth piece, since
    a difference quotient across a kink does not estimate the gradient.
    With ``resolution_floor`` a group whose absolute error is below the
    round-off resolution of the difference quotient also passes.
    """
    for layer in model.blocks:
        if layer.dropout_rate:
            model = model.copy()
            for lay in model.blocks:
                lay.dropout_rate = 0.0
            break
    loss0, grads, fwd = _loss_and_grads(model, graph, rng=None, training=False)
    lambdas, sigmas = fwd.lambdas, fwd.sigmas
    base = routing_signature(fwd)
    noise_floor = 0.0
    if resolution_floor:
        noise_floor = 16.0 * np.finfo(np.float64).eps * max(1.0, abs(loss0)) / step
    rng = np.random.default_rng(seed)

    def loss_at():
        f = forward(model, graph, lambdas=lambdas, sigmas=sigmas)
        return cross_entropy(f.probs, graph.label), f

    steps = [step * 10.0 ** -j for j in range(4)] if smooth_only else [step]
    errors, counts, abs_errors, skipped, refined = {}, {}, {}, {}, {}
    for name, p in model.parameters().items():
        flat = p.reshape(-1)
        order = np.arange(flat.size)
        if flat.size > max_coords:
            order = rng.permutation(flat.size)
        coords, numeric, kinks, shrunk = [], [], 0, 0
        for i in order:
            if len(coords) == max_coords:
                break
            orig = flat[i]
            for level, h in enumerate(steps):
                flat[i] = orig + h
                up, f_up = loss_at()
                flat[i] = orig - h
                down, f_down = loss_at()
                flat[i] = orig
                if not smooth_only or (
                    same_routing(base, routing_signature(f_up))
                    and same_routing(base, routing_signature(f_down))
                ):
                    coords.append(i)
                    numeric.append((up - down) / (2.0 * h))
                    shrunk += level > 0
                    break
            else:
                kinks += 1
        coords = np.array(coords, dtype=int)
        analytic = grads[name].reshape(-1)[coords]
        errors[name] = relative_error(analytic, np.array(numeric))
        abs_errors[name] = float(np.linalg.norm(analytic - np.array(numeric)))
        counts[name] = int(len(coords))
        skipped[name] = kinks
        refined[name] = shrunk
    return GradCheckReport(errors, tolerance, counts, abs_errors, noise_floor, skipped, refined)


def sgd_step(model, grads, lr):
    """In-place ``p <- p - lr * g`` for every parameter; returns the model."""
    if lr <= 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    params = model.parameters()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}; step aborted")
    for name, g in grads.items():
        params[name] -= lr * g
    return model


# --- training and evaluation -----------------------------------------------------


def _fold_rngs(seed, fold):
    init_seq, shuffle_seq, drop_seq = np.random.SeedSequence([int(seed), int(fold)]).spawn(3)
    return (
        int(init_seq.generate_state(1, np.uint64)[0]),
        np.random.default_rng(shuffle_seq),
        np.random.default_rng(drop_seq),
    )


def predict(model, graph):
    return int(np.argmax(forward(model, graph).probs))


def evaluate(model, dataset, indices):
    indices = list(indices)
    if not indices:
        raise DomainError("evaluate needs at least one graph")
    hits = sum(predict(model, dataset.graphs[i]) == dataset.graphs[i].label for i in indices)
    return hits / len(indices)


def train(dataset, fold_plan, fold, config, track_test=True):
    """Train one model on every fold except ``fold``; returns ``(model, FoldReport)``.

    Each epoch visits the training graphs in a seeded random order and takes
    one SGD step per graph.
    """
    if not 0 <= fold < fold_plan.k:
        raise DomainError(f"fold {fold} outside 0..{fold_plan.k - 1}")
    start = time.perf_counter()
    train_idx = fold_plan.train_indices(fold) if fold_plan.k > 1 else np.arange(len(dataset))
    test_idx = fold_plan.test_indices(fold)
    init_seed, shuffle_rng, drop_rng = _fold_rngs(config.seed, fold)
    model = init_model(
        dataset.feature_dim, dataset.num_classes, seed=init_seed, **config.model_kwargs()
    )
    losses, test_curve = [], []
    for epoch in range(config.epochs):
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        total = 0.0
        for i in order:
            loss, grads = compute_gradients(model, dataset.graphs[i], rng=drop_rng)
            sgd_step(model, grads, config.learning_rate)
            total += loss
        losses.append(total / len(order))
        if track_test and len(test_idx):
            test_curve.append(evaluate(model, dataset, test_idx))
        log.info(
            "fold %d epoch %d loss %.4f%s", fold, epoch + 1, losses[-1],
            f" test acc {test_curve[-1]:.4f}" if test_curve else "",
        )
    if test_curve:
        final = test_curve[-1]
    elif len(test_idx):
        final = evaluate(model, dataset, test_idx)
    else:
        final = float("nan")
    best_epoch = int(np.argmax(test_curve)) + 1 if test_curve else config.epochs
    report = FoldReport(
        fold_index=int(fold),
        test_accuracy=float(final),
        train_loss_curve=[float(v) for v in losses],
        wall_time=time.perf_counter() - start,
        test_accuracy_curve=[float(v) for v in test_curve],
        best_test_accuracy=float(max(test_curve)) if test_curve else float(final),
        best_epoch=best_epoch,
        train_accuracy=float(evaluate(model, dataset, train_idx)),
    )
    return model, report


@dataclass
class CVResult:
    dataset: str
    config: TrainConfig
    folds: list
    mean_accuracy: float
    std_accuracy: float
    mean_best_accuracy: float

    def summary_line(self):
        return f"{self.dataset}: {100 * self.mean_accuracy:.2f} ± {100 * self.std_accuracy:.2f}"

    def to_report(self):
        """Deterministic report document; wall times live in :meth:`timings`."""
        cfg = self.config.to_dict()
        run_id = hashlib.sha256(
            json.dumps([self.dataset, cfg], sort_keys=True).encode()
        ).hexdigest()[:16]
        folds = []
        for r in self.folds:
            d = asdict(r)
            d.pop("wall_time")
            folds.append(d)
        return {
            "schema": REPORT_SCHEMA,
            "run_id": run_id,
            "dataset": self.dataset,
            "config": cfg,
            "folds": folds,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "mean_best_epoch_accuracy": self.mean_best_accuracy,
        }

    def timings(self):
        return {
            "schema": REPORT_SCHEMA,
            "wall_time_per_fold": [r.wall_time for r in self.folds],
            "wall_time_total": float(sum(r.wall_time for r in self.folds)),
        }

    def table(self):
        rows = ["fold  test_acc  best_acc  best_epoch  final_loss"]
        for r in self.folds:
            rows.append(
                f"{r.fold_index:>4}  {r.test_accuracy:8.4f}  {r.best_test_accuracy:8.4f}"
                f"  {r.best_epoch:>10}  {r.train_loss_curve[-1]:10.4f}"
            )
        rows.append(self.summary_line())
        return "\n".join(rows)


def aggregate(dataset_name, config, reports):
    reports = sorted(reports, key=lambda r: r.fold_index)
    acc = np.array([r.test_accuracy for r in reports])
    best = np.array([r.best_test_accuracy for r in reports])
    return CVResult(
        dataset=dataset_name, config=config, folds=reports,
        mean_accuracy=float(acc.mean()), std_accuracy=float(acc.std()),
        mean_best_accuracy=float(best.mean()),
    )


def _run_fold(args):
    dataset, plan, fold, config = args
    try:
        return train(dataset, plan, fold, config)[1]
    except Exception as exc:
        raise RuntimeError(f"fold {fold} failed: {exc}") from exc


def cross_validate(dataset, config, parallel=1, folds=None):
    """Stratified k-fold training and evaluation; returns a :class:`CVResult`."""
    dataset = stratified_subsample(dataset, config.max_graphs, config.seed)
    plan = stratified_kfold(dataset, config.folds, config.seed)
    todo = range(plan.k) if folds is None else folds
    jobs = [(dataset, plan, f, config) for f in todo]
    if parallel > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=parallel) as pool:
            reports = list(pool.map(_run_fold, jobs))
    else:
        reports = [_run_fold(j) for j in jobs]
    return aggregate(dataset.name, config, reports)


def write_report(result, out_dir):
    """Write per-fold documents, then the merged ``report.json``, ``timings.json``
    and ``summary.txt``, all under ``out_dir``."""
    from pathlib import Path

    out = Path(out_dir)
    (out / "folds").mkdir(parents=True, exist_ok=True)
    doc = result.to_report()
    for fold_doc in doc["folds"]:
        (out / "folds" / f"fold_{fold_doc['fold_index']}.json").write_text(
            json.dumps(fold_doc, indent=2, sort_keys=True) + "\n"
        )
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(result.timings(), indent=2, sort_keys=True) + "\n")
    (out / "summary.txt").write_text(result.table() + "\n")
    return out / "report.json"
