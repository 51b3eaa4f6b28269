"""Multi-view graph classifier: three MV-GC + view-pool blocks, readout, 2-layer head.

Forward passes keep a cache so :func:`backward` can compute exact gradients
for every parameter; see ``training.compute_gradients``.
"""
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError
from .numeric import DTYPE, make_rng
from .spectral import check_sigma, mvgc_apply, mvgc_backward
from .views import ViewParams

BN_EPS = 1e-5
PROB_FLOOR = 1e-12
LAPLACIAN_POOLS = ("dominant", "mean", "max")
LAMBDA_MODES = ("eigh", "power", "bound")


@dataclass(eq=False)
class LayerParams:
    q: np.ndarray  # (N, d, d)
    theta: np.ndarray  # (N, K)
    bn_gamma: np.ndarray  # (N,)
    bn_beta: np.ndarray  # (N,)
    weight: np.ndarray  # (K*d, m)
    bias: np.ndarray  # (m,)
    dropout_rate: float = 0.5
    alpha: float = 1.0
    sigma: float = 1.0  # or "median"
    squared_kernel: bool = False
    lambda_mode: str = "eigh"
    laplacian_pool: str = "dominant"

    def __post_init__(self):
        n = self.q.shape[0]
        for name in ("theta", "bn_gamma", "bn_beta"):
            if getattr(self, name).shape[0] != n:
                raise ShapeError(f"{name} has {getattr(self, name).shape[0]} views, q has {n}")
        if self.weight.shape[0] != self.k_order * self.in_dim:
            raise ShapeError(
                f"weight has {self.weight.shape[0]} rows, expected K*d = {self.k_order * self.in_dim}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DomainError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if self.laplacian_pool not in LAPLACIAN_POOLS:
            raise DomainError(f"laplacian_pool must be one of {LAPLACIAN_POOLS}")
        if self.lambda_mode not in LAMBDA_MODES:
            raise DomainError(f"lambda_mode must be one of {LAMBDA_MODES}")
        check_sigma(self.sigma)

    @property
    def n_views(self):
        return self.q.shape[0]

    @property
    def in_dim(self):
        return self.q.shape[1]

    @property
    def k_order(self):
        return self.theta.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    @property
    def views(self):
        return [ViewParams(self.q[v], v) for v in range(self.n_views)]

    def arrays(self):
        return OrderedDict(
            q=self.q, theta=self.theta, bn_gamma=self.bn_gamma, bn_beta=self.bn_beta,
            weight=self.weight, bias=self.bias,
        )


@dataclass(eq=False)
class Model:
    blocks: list
    fc1_weight: np.ndarray
    fc1_bias: np.ndarray
    fc2_weight: np.ndarray
    fc2_bias: np.ndarray

    @property
    def num_classes(self):
        return self.fc2_weight.shape[1]

    @property
    def in_dim(self):
        return self.blocks[0].in_dim

    def parameters(self):
        """Ordered mapping of parameter name to the (mutable) array."""
        out = OrderedDict()
        for b, layer in enumerate(self.blocks):
            for name, arr in layer.arrays().items():
                out[f"block{b}.{name}"] = arr
        out["fc1.weight"] = self.fc1_weight
        out["fc1.bias"] = self.fc1_bias
        out["fc2.weight"] = self.fc2_weight
        out["fc2.bias"] = self.fc2_bias
        return out

    def copy(self):
        blocks = [
            LayerParams(
                **{k: v.copy() for k, v in layer.arrays().items()},
                dropout_rate=layer.dropout_rate, alpha=layer.alpha, sigma=layer.sigma,
                squared_kernel=layer.squared_kernel, lambda_mode=layer.lambda_mode,
                laplacian_pool=layer.laplacian_pool,
            )
            for layer in self.blocks
        ]
        return Model(
            blocks, self.fc1_weight.copy(), self.fc1_bias.copy(),
            self.fc2_weight.copy(), self.fc2_bias.copy(),
        )


def _uniform_linear(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def init_layer(rng, in_dim, n_views, k_order, out_dim, **hyper):
    q = rng.uniform(0.0, 1.0, (n_views, in_dim, in_dim))
    theta = rng.uniform(-1.0 / k_order, 1.0 / k_order, (n_views, k_order))
    weight, bias = _uniform_linear(rng, k_order * in_dim, out_dim)
    return LayerParams(
        q=q, theta=theta, bn_gamma=np.ones(n_views), bn_beta=np.zeros(n_views),
        weight=weight, bias=bias, **hyper,
    )


def init_model(
    in_dim, num_classes, *, seed=0, k_order=6, views=(8, 6, 6), m_schedule=(80, 128, 256),
    hidden=128, dropout_rate=0.5, alpha=1.0, sigma=1.0, squared_kernel=False,
    lambda_mode="eigh", laplacian_pool="dominant",
):
    if len(views) != len(m_schedule):
        raise ShapeError(f"{len(views)} view counts for {len(m_schedule)} blocks")
    rng = make_rng(seed)
    hyper = dict(
        dropout_rate=dropout_rate, alpha=alpha, sigma=sigma, squared_kernel=squared_kernel,
        lambda_mode=lambda_mode, laplacian_pool=laplacian_pool,
    )
    blocks, d = [], in_dim
    for n_views, m in zip(views, m_schedule):
        blocks.append(init_layer(rng, d, n_views, k_order, m, **hyper))
        d = m
    w1, b1 = _uniform_linear(rng, 2 * d, hidden)
    w2, b2 = _uniform_linear(rng, hidden, num_classes)
    return Model(blocks, w1, b1, w2, b2)


# --- view aggregation -------------------------------------------------------


@dataclass(eq=False)
class PoolOutcome:
    pooled: np.ndarray
    argmax_view: np.ndarray
    dominant_index: int


def _bn_stats(z):
    axes = tuple(range(1, z.ndim))
    mu = z.mean(axis=axes, keepdims=True)
    sd = np.sqrt(((z - mu) ** 2).mean(axis=axes, keepdims=True))
    return mu, sd


def view_batch_norm(signals, gamma, beta, eps=BN_EPS):
    """Normalize each view by the mean/std of all its elements, then scale and shift."""
    z = np.asarray(signals, dtype=DTYPE)
    gamma = np.asarray(gamma, dtype=DTYPE)
    beta = np.asarray(beta, dtype=DTYPE)
    if z.ndim != 3:
        raise ShapeError(f"expected N equally shaped views, got array of shape {z.shape}")
    if gamma.shape != (z.shape[0],) or beta.shape != (z.shape[0],):
        raise ShapeError(f"{z.shape[0]} views but gamma {gamma.shape}, beta {beta.shape}")
    mu, sd = _bn_stats(z)
    xhat = (z - mu) / (sd + eps)
    return list(gamma[:, None, None] * xhat + beta[:, None, None])


def view_max_pool(normed):
    """Element-wise max over views; ties go to the lowest view index."""
    if len(normed) == 0:
        raise DomainError("view pooling needs at least one view")
    z = np.asarray(normed, dtype=DTYPE)
    if z.ndim != 3:
        raise ShapeError(f"views must share one shape, got {z.shape}")
    arg = np.argmax(z, axis=0)
    pooled = np.take_along_axis(z, arg[None], axis=0)[0]
    counts = np.bincount(arg.ravel(), minlength=z.shape[0])
    return PoolOutcome(pooled, arg, int(np.argmax(counts)))


def dominant_laplacian(outcome, laplacians):
    k = outcome.dominant_index
    if not 0 <= k < len(laplacians):
        raise IndexError(f"dominant view {k} outside 0..{len(laplacians) - 1}")
    return laplacians[k]


def _pool_laplacians(l_h, outcome, mode):
    if mode == "dominant":
        return l_h[outcome.dominant_index], None
    if mode == "mean":
        return l_h.mean(axis=0), None
    arg = np.argmax(l_h, axis=0)
    return np.take_along_axis(l_h, arg[None], axis=0)[0], arg


def _pool_laplacians_backward(dl, l_h_shape, outcome, mode, arg):
    nv = l_h_shape[0]
    out = np.zeros(l_h_shape)
    if mode == "dominant":
        out[outcome.dominant_index] = dl
    elif mode == "mean":
        out[:] = dl / nv
    else:
        np.put_along_axis(out, arg[None], dl[None], axis=0)
    return out


def _laplacian_bound(l_h, pooled_l, mode, hybrid_bound):
    if mode == "max":
        # element-wise max keeps no eigenvalue guarantee; use the row-sum bound
        return float(np.abs(pooled_l).sum(axis=1).max())
    return hybrid_bound


# --- blocks -------------------------------------------------------------------


def _block_apply(x, l_in, layer, training, rng, lambdas=None, l_in_bound=2.0, sigma=None):
    z, l_h, lambdas, mcache = mvgc_apply(
        x, l_in, layer, lambdas=lambdas, l_in_bound=l_in_bound, sigma=sigma
    )
    mu, sd = _bn_stats(z)
    den = sd + BN_EPS
    xhat = (z - mu) / den
    bn = layer.bn_gamma[:, None, None] * xhat + layer.bn_beta[:, None, None]
    outcome = view_max_pool(bn)
    pre = outcome.pooled @ layer.weight + layer.bias
    act = np.maximum(pre, 0.0)
    mask = None
    if training and layer.dropout_rate > 0:
        if rng is None:
            raise DomainError("dropout in training mode needs an rng")
        keep = rng.random(act.shape) >= layer.dropout_rate
        mask = keep / (1.0 - layer.dropout_rate)
        y = act * mask
    else:
        y = act
    l_next, l_arg = _pool_laplacians(l_h, outcome, layer.laplacian_pool)
    next_bound = _laplacian_bound(l_h, l_next, layer.laplacian_pool, l_in_bound + 2.0 * layer.alpha)
    cache = dict(
        mcache=mcache, z=z, mu=mu, sd=sd, den=den, xhat=xhat, outcome=outcome, pre=pre,
        mask=mask, l_shape=l_h.shape, l_arg=l_arg, lambdas=lambdas,
    )
    return y, l_next, next_bound, cache


def _block_backward(dy, dl_next, layer, cache):
    g = {}
    if cache["mask"] is not None:
        dy = dy * cache["mask"]
    dpre = dy * (cache["pre"] > 0)
    outcome = cache["outcome"]
    g["weight"] = outcome.pooled.T @ dpre
    g["bias"] = dpre.sum(axis=0)
    dpooled = dpre @ layer.weight.T
    nv = layer.n_views
    dbn = (outcome.argmax_view[None] == np.arange(nv)[:, None, None]) * dpooled[None]
    xhat = cache["xhat"]
    g["bn_gamma"] = (dbn * xhat).sum(axis=(1, 2))
    g["bn_beta"] = dbn.sum(axis=(1, 2))
    dxhat = dbn * layer.bn_gamma[:, None, None]
    z, mu, sd, den = cache["z"], cache["mu"], cache["sd"], cache["den"]
    centered = z - mu
    count = z[0].size
    dz = (dxhat - dxhat.mean(axis=(1, 2), keepdims=True)) / den
    dsd = -(dxhat * centered).sum(axis=(1, 2), keepdims=True) / den ** 2
    live = sd > 0
    dz = dz + np.where(live, dsd * centered / (count * np.where(live, sd, 1.0)), 0.0)
    dl_h = None
    if dl_next is not None:
        dl_h = _pool_laplacians_backward(
            dl_next, cache["l_shape"], outcome, layer.laplacian_pool, cache["l_arg"]
        )
    dq, dtheta, dx, dl_in = mvgc_backward(dz, cache["mcache"], dl_h)
    g["q"] = dq
    g["theta"] = dtheta
    return g, dx, dl_in


def block_forward(x, l_in, layer, training=False, rng=None, lambdas=None):
    """One MV-GC + VPOOL + linear block; returns ``(y, l_next)``."""
    y, l_next, _, _ = _block_apply(x, l_in, layer, training, rng, lambdas=lambdas)
    return y, l_next


# --- readout, head, loss ------------------------------------------------------


def readout(y):
    """Concatenate column means and column maxes over vertices."""
    y = np.asarray(y, dtype=DTYPE)
    if y.ndim != 2 or y.shape[0] < 1:
        raise DomainError("readout needs at least one vertex")
    return np.concatenate([y.mean(axis=0), y.max(axis=0)])


def softmax(logits):
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / e.sum()


def cross_entropy(pred, target):
    pred = np.asarray(pred, dtype=DTYPE)
    if not 0 <= target < pred.shape[0]:
        raise DomainError(f"target {target} outside 0..{pred.shape[0] - 1}")
    if abs(pred.sum() - 1.0) > 1e-6:
        raise DomainError(f"prediction sums to {pred.sum()}, not 1")
    return float(-np.log(max(pred[target], PROB_FLOOR)))


@dataclass(eq=False)
class ForwardPass:
    probs: np.ndarray
    lambdas: list
    cache: dict = field(repr=False)
    sigmas: list = field(default_factory=list)


def forward(model, graph, training=False, rng=None, lambdas=None, sigmas=None):
    """Full forward pass keeping everything :func:`backward` needs.

    ``lambdas`` and ``sigmas`` pin the per-block eigenvalue estimates and
    kernel widths, which backprop treats as constants.
    """
    x = graph.features
    if x.shape[1] != model.in_dim:
        raise ShapeError(f"graph has {x.shape[1]} features, model expects {model.in_dim}")
    l_in = graph.intrinsic_laplacian()
    bound = 2.0
    caches, used, widths = [], [], []
    for b, layer in enumerate(model.blocks):
        lam = None if lambdas is None else lambdas[b]
        sig = None if sigmas is None else sigmas[b]
        x, l_in, bound, cache = _block_apply(x, l_in, layer, training, rng, lam, bound, sig)
        caches.append(cache)
        used.append(cache["lambdas"])
        widths.append(cache["mcache"]["vcache"]["sigma"])
    y = x
    r = readout(y)
    h_pre = r @ model.fc1_weight + model.fc1_bias
    h = np.maximum(h_pre, 0.0)
    logits = h @ model.fc2_weight + model.fc2_bias
    probs = softmax(logits)
    cache = dict(blocks=caches, y=y, r=r, h_pre=h_pre, h=h, logits=logits)
    return ForwardPass(probs, used, cache, widths)


def _row_classes(y, tol=1e-9):
    """Lowest index of the numerically identical row, for every row of ``y``."""
    scale = tol * max(1.0, float(np.abs(y).max(initial=0.0)))
    canon = np.arange(y.shape[0])
    for i in range(y.shape[0]):
        close = np.flatnonzero(np.abs(y[:i] - y[i]).max(axis=1, initial=0.0) <= scale)
        if close.size:
            canon[i] = canon[close[0]]
    return canon


def routing_signature(fwd):
    """Every discrete choice of a forward pass: metric argmax positions, view-pool
    winners, Laplacian pooling choices, ReLU masks and readout argmax rows.

    Two passes with equal signatures lie on the same smooth piece of the loss.
    Choices between exactly tied candidates (symmetric metric entries, vertices
    related by a graph automorphism) are canonicalized since they cannot change
    the value.
    """
    parts = []
    for bc in fwd.cache["blocks"]:
        vc = bc["mcache"]["vcache"]
        d = vc["m"].shape[-1]
        row, col = np.divmod(vc["pos"], d)
        parts += [np.minimum(row, col) * d + np.maximum(row, col)]
        parts += [bc["outcome"].argmax_view, bc["pre"] > 0]
        parts.append(np.array([bc["outcome"].dominant_index]))
        if bc["l_arg"] is not None:
            parts.append(bc["l_arg"])
    y = fwd.cache["y"]
    parts += [_row_classes(y)[np.argmax(y, axis=0)], fwd.cache["h_pre"] > 0]
    return parts


def same_routing(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def classify(model, graph, training=False, rng=None):
    return forward(model, graph, training, rng).probs


def backward(model, fwd, target):
    """Gradient of the cross-entropy loss for every entry of ``model.parameters()``."""
    c = fwd.cache
    probs = fwd.probs
    dlogits = probs.copy()
    if probs[target] >= PROB_FLOOR:
        dlogits[target] -= 1.0
    else:
        dlogits[:] = 0.0
    grads = OrderedDict()
    grads["fc2.weight"] = np.outer(c["h"], dlogits)
    grads["fc2.bias"] = dlogits
    dh = model.fc2_weight @ dlogits
    dh_pre = dh * (c["h_pre"] > 0)
    grads["fc1.weight"] = np.outer(c["r"], dh_pre)
    grads["fc1.bias"] = dh_pre
    dr = model.fc1_weight @ dh_pre
    y = c["y"]
    n, m = y.shape
    dy = np.broadcast_to(dr[:m] / n, y.shape).copy()
    top = np.argmax(y, axis=0)
    dy[top, np.arange(m)] += dr[m:]
    dl = None
    block_grads = []
    for b in range(len(model.blocks) - 1, -1, -1):
        g, dy, dl = _block_backward(dy, dl, model.blocks[b], c["blocks"][b])
        block_grads.append((b, g))
    out = OrderedDict()
    for b, g in sorted(block_grads):
        for name in model.blocks[b].arrays():
            out[f"block{b}.{name}"] = g[name]
    for name in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"):
        out[name] = grads[name]
    return out
