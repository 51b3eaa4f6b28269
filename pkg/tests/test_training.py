import json

import numpy as np
import pytest

from mvagc.errors import DomainError, NonFiniteError
from mvagc.graph import Graph
from mvagc.views import median_sigma
from mvagc.model import _row_classes, cross_entropy, forward, init_model, routing_signature, same_routing
from mvagc.training import (
    FoldReport, TrainConfig, aggregate, compute_gradients, cross_validate, evaluate,
    finite_difference_check, relative_error, sgd_step, train,
)
from mvagc.tu import Dataset, stratified_kfold, stratified_subsample

from conftest import random_graph, small_model


def toy_dataset(rng, count=20, d=3, q=2, n_range=(4, 8)):
    # one-hot vertex types; the class decides which type dominates
    graphs = []
    for i in range(count):
        label = i % q
        n = int(rng.integers(*n_range))
        types = np.where(rng.random(n) < 0.8, label, rng.integers(0, d, n))
        graphs.append(random_graph(rng, n, d=d, label=label, features=np.eye(d)[types]))
    return Dataset("TOY", graphs, q, d, "label-onehot")


SMALL = dict(k_order=3, views_per_block=(2, 2, 2), m_schedule=(6, 5, 4), hidden=8)


def test_relative_error():
    assert relative_error([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert abs(relative_error([1.0, 0.0], [0.0, 1.0]) - np.sqrt(2)) < 1e-15


def test_uniform_prediction_bias_gradient(rng):
    m = small_model(3)
    m.fc2_weight[:] = 0.0
    m.fc2_bias[:] = 0.0
    g = random_graph(rng, 5, d=3, label=0)
    loss, grads = compute_gradients(m, g)
    assert abs(loss - np.log(2)) < 1e-12
    assert np.allclose(grads["fc2.bias"], [-0.5, 0.5], atol=1e-15)
    assert not grads["fc1.weight"].any()


def test_gradient_shapes_match_parameters(rng):
    m = small_model(3)
    _, grads = compute_gradients(m, random_graph(rng, 6, d=3))
    params = m.parameters()
    assert list(grads) == list(params)
    for k in params:
        assert grads[k].shape == params[k].shape and np.all(np.isfinite(grads[k]))


@pytest.mark.parametrize("pool", ["dominant", "mean", "max"])
@pytest.mark.parametrize("squared", [False, True])
def test_finite_differences_five_vertices(rng, pool, squared):
    m = small_model(3, laplacian_pool=pool, squared_kernel=squared, sigma=0.8)
    rep = finite_difference_check(m, random_graph(rng, 5, d=3, label=1))
    assert rep.passed, rep.lines()
    assert max(rep.errors.values()) < 1e-4


def test_finite_differences_with_dropout_model_and_power_lambda(rng):
    # dropout is switched off internally; lambda estimates come from power iteration
    m = small_model(3, dropout_rate=0.5, lambda_mode="power", k_order=4)
    rep = finite_difference_check(m, random_graph(rng, 6, d=3))
    assert rep.passed, rep.lines()
    assert m.blocks[0].dropout_rate == 0.5


def test_finite_differences_step_size_sanity(rng):
    m = small_model(3)
    g = random_graph(rng, 5, d=3)
    fine = finite_difference_check(m, g, step=1e-5)
    coarse = finite_difference_check(m, g, step=1e-2)
    assert max(coarse.errors.values()) > max(fine.errors.values())


def test_gradcheck_report_flags_failures(rng):
    rep = finite_difference_check(small_model(3), random_graph(rng, 4, d=3), tolerance=1e-14)
    assert not rep.passed and rep.failures
    assert any(line.startswith("FAIL") for line in rep.lines())


def test_tie_rule_routes_pooled_gradient_to_view_zero(rng):
    m = small_model(3, views=(2, 2, 2))
    for layer in m.blocks:
        for name in ("q", "theta"):
            arr = getattr(layer, name)
            arr[1] = arr[0]
    _, grads = compute_gradients(m, random_graph(rng, 6, d=3))
    for b in range(3):
        assert not grads[f"block{b}.theta"][1].any()
        assert not grads[f"block{b}.bn_gamma"][1] and not grads[f"block{b}.bn_beta"][1]
        assert grads[f"block{b}.theta"][0].any()


def test_sgd_step():
    m = small_model(3)
    params = m.parameters()
    before = {k: v.copy() for k, v in params.items()}
    grads = {k: np.full_like(v, 2.0) for k, v in params.items()}
    sgd_step(m, grads, 0.1)
    for k in params:
        assert np.allclose(params[k], before[k] - 0.2, rtol=0, atol=1e-15)
    one = {k: np.zeros_like(v) for k, v in params.items()}
    one["fc2.bias"][0] = 2.0
    m.fc2_bias[0] = 1.0
    sgd_step(m, one, 0.1)
    assert abs(m.fc2_bias[0] - 0.8) < 1e-15
    tiny = small_model(3)
    ref = small_model(3)
    sgd_step(tiny, grads, 1e-300)
    for a, b in zip(tiny.parameters().values(), ref.parameters().values()):
        assert np.allclose(a, b, rtol=1e-15, atol=1e-250)
    with pytest.raises(DomainError):
        sgd_step(m, grads, 0.0)
    bad = dict(grads)
    bad["fc1.bias"] = np.full_like(grads["fc1.bias"], np.nan)
    snapshot = m.fc2_bias.copy()
    with pytest.raises(NonFiniteError):
        sgd_step(m, bad, 0.1)
    assert np.array_equal(m.fc2_bias, snapshot)


def test_sgd_step_deterministic(rng):
    g = random_graph(rng, 6, d=3)
    a, b = small_model(3), small_model(3)
    _, grads = compute_gradients(a, g)
    sgd_step(a, grads, 0.01)
    sgd_step(b, grads, 0.01)
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters().values(), b.parameters().values()))


def test_small_step_decreases_loss(rng):
    g = random_graph(rng, 6, d=3, label=1)
    m = small_model(3)
    loss, grads = compute_gradients(m, g)
    lambdas = forward(m, g).lambdas
    sgd_step(m, grads, 1e-6)
    after = cross_entropy(forward(m, g, lambdas=lambdas).probs, 1)
    assert after < loss


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_diagnostic(rng):
    m = small_model(3)
    g = random_graph(rng, 5, d=3)
    m.fc1_weight[0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="first bad value"):
        compute_gradients(m, g)


def test_train_epoch_counts_and_curve(rng):
    ds = toy_dataset(rng, count=3)
    plan = stratified_kfold(np.zeros(3, dtype=int), 1, seed=0)
    cfg = TrainConfig(epochs=1, dropout_rate=0.0, **SMALL)
    calls = []
    import mvagc.training as tr

    original = tr.sgd_step
    tr.sgd_step = lambda *a: calls.append(1) or original(*a)
    try:
        _, rep = train(ds, plan, 0, cfg)
    finally:
        tr.sgd_step = original
    assert len(calls) == 3 and len(rep.train_loss_curve) == 1
    with pytest.raises(DomainError):
        TrainConfig(epochs=0)
    with pytest.raises(DomainError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(DomainError):
        train(ds, plan, 1, cfg)


def test_overfit_single_graph_loss_non_increasing(rng):
    g = random_graph(rng, 6, d=3, label=1)
    ds = Dataset("ONE", [g], 2, 3, "continuous")
    plan = stratified_kfold(np.zeros(1, dtype=int), 1, seed=0)
    cfg = TrainConfig(epochs=50, learning_rate=1e-3, dropout_rate=0.0, **SMALL)
    _, rep = train(ds, plan, 0, cfg)
    curve = np.array(rep.train_loss_curve)
    assert curve[-1] < curve[0]
    assert np.all(curve[1:] <= curve[:-1] * 1.05)


def test_train_deterministic(rng):
    ds = toy_dataset(rng, count=10)
    plan = stratified_kfold(ds, 2, seed=4)
    cfg = TrainConfig(epochs=2, seed=4, dropout_rate=0.3, **SMALL)
    m1, r1 = train(ds, plan, 0, cfg)
    m2, r2 = train(ds, plan, 0, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(m1.parameters().values(), m2.parameters().values()))
    assert r1.train_loss_curve == r2.train_loss_curve and r1.test_accuracy == r2.test_accuracy


def test_variable_graph_sizes_share_parameters(rng):
    ds = toy_dataset(rng, count=8, n_range=(2, 12))
    plan = stratified_kfold(ds, 2, seed=0)
    cfg = TrainConfig(epochs=1, dropout_rate=0.0, **SMALL)
    m, _ = train(ds, plan, 0, cfg)
    fresh = init_model(3, 2, **cfg.model_kwargs())
    assert {k: v.shape for k, v in m.parameters().items()} == {
        k: v.shape for k, v in fresh.parameters().items()
    }
    for g in ds.graphs:
        assert forward(m, g).probs.shape == (2,)


def test_evaluate(rng):
    ds = toy_dataset(rng, count=10)
    m = small_model(3)
    m.fc2_weight[:] = 0.0
    m.fc2_bias[:] = 0.0
    # constant logits tie: argmax picks class 0, so accuracy is the class-0 share
    idx = list(range(10))
    assert evaluate(m, ds, idx) == sum(g.label == 0 for g in ds.graphs) / 10
    m.fc2_bias[:] = [0.0, 1.0]
    assert evaluate(m, ds, [1, 3, 5]) == 1.0
    assert evaluate(m, ds, [0, 1, 2, 3]) == 0.5
    with pytest.raises(DomainError):
        evaluate(m, ds, [])


def test_memorizer_reaches_full_train_accuracy(rng):
    ds = toy_dataset(rng, count=6)
    plan = stratified_kfold(np.zeros(6, dtype=int), 1, seed=0)
    cfg = TrainConfig(epochs=60, learning_rate=8e-3, dropout_rate=0.0, **SMALL)
    m, rep = train(ds, plan, 0, cfg)
    assert rep.train_accuracy == 1.0 and evaluate(m, ds, range(6)) == 1.0


def test_aggregate_population_std():
    cfg = TrainConfig()
    reps = [FoldReport(i, a, [0.1]) for i, a in enumerate([0.8, 1.0])]
    res = aggregate("X", cfg, reps)
    assert abs(res.mean_accuracy - 0.9) < 1e-15 and abs(res.std_accuracy - 0.1) < 1e-15
    assert res.summary_line() == "X: 90.00 ± 10.00"


def test_cross_validate_two_folds(rng, tmp_path):
    from mvagc.training import write_report

    ds = toy_dataset(rng, count=20)
    cfg = TrainConfig(epochs=2, folds=2, seed=1, **SMALL)
    res = cross_validate(ds, cfg)
    assert [r.fold_index for r in res.folds] == [0, 1]
    assert abs(res.mean_accuracy - np.mean([r.test_accuracy for r in res.folds])) < 1e-15
    path = write_report(res, tmp_path)
    doc = json.loads(path.read_text())
    assert doc["schema"] == "mvagc.cv-report/1" and doc["config"] == cfg.to_dict()
    assert TrainConfig.from_dict(doc["config"]) == cfg
    again = cross_validate(ds, TrainConfig.from_dict(doc["config"]))
    assert again.to_report() == res.to_report()
    assert (tmp_path / "summary.txt").read_text().strip().endswith(res.summary_line())


def test_parallel_folds_identical(rng):
    ds = toy_dataset(rng, count=12)
    cfg = TrainConfig(epochs=1, folds=2, **SMALL)
    assert cross_validate(ds, cfg, parallel=2).to_report() == cross_validate(ds, cfg).to_report()


def test_config_round_trip_and_unknown_keys():
    cfg = TrainConfig(views_per_block=[2, 3, 4])
    assert cfg.views_per_block == (2, 3, 4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(DomainError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(DomainError):
        TrainConfig(encoding="nope")


def test_identical_features_train_finite():
    rng = np.random.default_rng(0)
    graphs = [random_graph(rng, 5, d=2, label=i % 2, features=np.ones((5, 2))) for i in range(4)]
    ds = Dataset("FLAT", graphs, 2, 2, "label-onehot")
    plan = stratified_kfold(ds, 2, seed=0)
    m, rep = train(ds, plan, 0, TrainConfig(epochs=2, **SMALL))
    assert all(np.all(np.isfinite(p)) for p in m.parameters().values())
    assert np.all(np.isfinite(rep.train_loss_curve))


def test_isolated_vertices_train_finite():
    a = np.zeros((4, 4))
    a[0, 1] = a[1, 0] = 1.0
    graphs = [Graph(a, np.eye(4)[:, :3] + i, i % 2) for i in range(4)]
    ds = Dataset("ISO", graphs, 2, 3, "continuous")
    m, _ = train(ds, stratified_kfold(ds, 2, 0), 0, TrainConfig(epochs=1, **SMALL))
    lap = graphs[0].intrinsic_laplacian()
    assert np.array_equal(lap[3], [0, 0, 0, 1]) and np.array_equal(lap[2], [0, 0, 1, 0])
    assert all(np.all(np.isfinite(p)) for p in m.parameters().values())


def test_kink_crossing_coordinates_use_a_smaller_step(rng):
    m = small_model(3)
    g = random_graph(rng, 6, d=3)
    pre = forward(m, g).cache["blocks"][2]["pre"]
    i, j = np.unravel_index(np.argmax(pre), pre.shape)
    m.blocks[2].bias[j] -= pre[i, j] - 3e-6  # one ReLU input now sits 3e-6 above its kink
    rep = finite_difference_check(m, g, step=1e-5)
    assert rep.step_refined["block2.bias"] >= 1 and rep.passed
    naive = finite_difference_check(m, g, step=1e-5, smooth_only=False)
    assert naive.errors["block2.bias"] > rep.errors["block2.bias"]


def test_routing_signature_canonicalizes_automorphic_vertices(rng):
    # a star with identical leaves: leaf rows tie exactly in every block output
    a = np.zeros((5, 5))
    a[0, 1:] = a[1:, 0] = 1.0
    x = np.vstack([[1.0, 0, 0], np.tile([0, 1.0, 0], (4, 1))])
    m = small_model(3)
    fwd = forward(m, Graph(a, x, 0))
    assert _row_classes(fwd.cache["y"]).tolist() == [0, 1, 1, 1, 1]
    sig = routing_signature(fwd)
    assert same_routing(sig, routing_signature(forward(m, Graph(a, x, 0))))
    assert not same_routing(sig, sig[:-1])


def test_median_sigma_is_frozen_for_finite_differences(rng):
    m = small_model(3, sigma="median")
    g = random_graph(rng, 6, d=3)
    fwd = forward(m, g)
    assert len(fwd.sigmas) == 3 and all(s > 0 for s in fwd.sigmas)
    assert fwd.sigmas[0] == pytest.approx(median_sigma(g.features))
    rep = finite_difference_check(m, g)
    assert rep.passed, rep.lines()
    with pytest.raises(DomainError):
        TrainConfig(sigma="mean")


def test_cross_validate_applies_max_graphs(rng):
    graphs = [random_graph(rng, 5, d=2, label=i % 2) for i in range(24)]
    ds = Dataset("SUB", graphs, 2, 2, "continuous")
    cfg = TrainConfig(epochs=1, folds=2, max_graphs=10, **SMALL)
    res = cross_validate(ds, cfg)
    ref = cross_validate(stratified_subsample(ds, 10, 0), TrainConfig(epochs=1, folds=2, **SMALL))
    assert [r.train_loss_curve for r in res.folds] == [r.train_loss_curve for r in ref.folds]
    assert res.to_report()["config"]["max_graphs"] == 10
    with pytest.raises(DomainError):
        TrainConfig(max_graphs=0)
