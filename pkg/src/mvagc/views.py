"""Per-view learned metric and the hybrid Laplacian it induces.

Every function accepts either one view or a stack of views along a leading
axis, so all views of a layer are built in one vectorized pass. Views never
interact here; results come back in view order.
"""
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError, ShapeError
from .graph import inv_sqrt_degree
from .numeric import DTYPE

DIST_EPS = 1e-12


class DegenerateMetricWarning(RuntimeWarning):
    pass


@dataclass(eq=False)
class ViewParams:
    q_factor: np.ndarray
    view_index: int = 0


@dataclass(frozen=True, eq=False)
class PairIndex:
    """Unique vertex pairs ``(i, j)``, ``i < j``, in lexicographic order."""

    n: int
    rows: np.ndarray
    cols: np.ndarray

    def __len__(self):
        return len(self.rows)

    @property
    def pairs(self):
        return list(zip(self.rows.tolist(), self.cols.tolist()))


@lru_cache(maxsize=512)
def pair_index(n):
    rows, cols = np.triu_indices(n, k=1)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return PairIndex(n, rows, cols)


@dataclass(eq=False)
class ViewGraph:
    h_matrix: np.ndarray
    s_matrix: np.ndarray
    l_view: np.ndarray
    l_hybrid: np.ndarray


def feature_differences(x):
    """Rows ``x_i - x_j`` for every unique pair; returns ``(F, PairIndex)``."""
    x = np.asarray(x, dtype=DTYPE)
    n = x.shape[0]
    if n < 2:
        raise DomainError(f"need at least 2 vertices to form pairs, got {n}")
    idx = pair_index(n)
    return x[idx.rows] - x[idx.cols], idx


def _metric(q):
    """``Q Q^T / max(Q Q^T)`` with the argmax position, for one or many views."""
    g = q @ np.swapaxes(q, -1, -2)
    flat = g.reshape(g.shape[:-2] + (-1,))
    pos = np.argmax(flat, axis=-1)
    top = np.take_along_axis(flat, pos[..., None], axis=-1)[..., 0]
    scale = np.where(top > 0, top, 1.0)
    if np.any(top <= 0):
        warnings.warn("metric factor is zero; metric left unnormalized", DegenerateMetricWarning)
    return g / scale[..., None, None], g, pos, top


def regularized_metric(view):
    """Metric ``M = Q Q^T`` divided by its largest entry.

    ``view`` may be a ViewParams, a ``(d, d)`` factor or a ``(N, d, d)`` stack.
    """
    q = view.q_factor if isinstance(view, ViewParams) else view
    q = np.asarray(q, dtype=DTYPE)
    if not np.all(np.isfinite(q)):
        raise DomainError("metric factor has non-finite entries")
    return _metric(q)[0]


def pairwise_mahalanobis(f, m, eps=DIST_EPS):
    """Distances ``sqrt(((F M) * F) 1 + eps)`` without forming ``F M F^T``."""
    f = np.asarray(f, dtype=DTYPE)
    m = np.asarray(m, dtype=DTYPE)
    if f.shape[-1] != m.shape[-1] or m.shape[-1] != m.shape[-2]:
        raise ShapeError(f"difference matrix {f.shape} incompatible with metric {m.shape}")
    return np.sqrt(np.einsum("...cd,cd->...c", f @ m, f) + eps)


def scatter_distances(d, idx):
    d = np.asarray(d, dtype=DTYPE)
    if d.shape[-1] != len(idx):
        raise ShapeError(f"{d.shape[-1]} distances for {len(idx)} pairs")
    h = np.zeros(d.shape[:-1] + (idx.n, idx.n))
    h[..., idx.rows, idx.cols] = d
    h[..., idx.cols, idx.rows] = d
    return h


def gather_distances(h, idx):
    return h[..., idx.rows, idx.cols]


def gaussian_similarity(h, sigma, squared=False):
    """``exp(-H / 2 sigma^2)``; with ``squared=True`` the kernel uses ``H**2``."""
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    h = np.asarray(h, dtype=DTYPE)
    arg = h * h if squared else h
    return np.exp(-arg / (2.0 * sigma * sigma))


def hybrid_laplacian(l_in, s_v, alpha):
    """Return ``(L_v, L_h)`` with ``L_v`` the normalized Laplacian of ``S_v``."""
    l_in = np.asarray(l_in, dtype=DTYPE)
    s_v = np.asarray(s_v, dtype=DTYPE)
    if l_in.shape[-2:] != s_v.shape[-2:]:
        raise ShapeError(f"input Laplacian {l_in.shape} vs similarity {s_v.shape}")
    if alpha < 0:
        raise DomainError(f"alpha must be nonnegative, got {alpha}")
    dinv = inv_sqrt_degree(s_v)
    n = s_v.shape[-1]
    l_v = np.eye(n) - dinv[..., :, None] * s_v * dinv[..., None, :]
    return l_v, l_in + alpha * l_v


def median_sigma(x):
    """Median pairwise Euclidean distance, a data-driven kernel width."""
    f, _ = feature_differences(x)
    med = float(np.median(np.sqrt((f * f).sum(axis=1))))
    return med if med > 0 else 1.0


def view_forward(x, l_in, q, alpha=1.0, sigma=1.0, squared=False):
    """Build the view graphs for a stack of factors ``q`` of shape ``(N, d, d)``.

    Returns ``(ViewGraph, cache)``; the ViewGraph fields carry a leading view axis.
    """
    f, idx = feature_differences(x)
    m, g, pos, top = _metric(q)
    scale = np.where(top > 0, top, 1.0)
    fm = f @ m
    dist = np.sqrt(np.einsum("vcd,cd->vc", fm, f) + DIST_EPS)
    h = scatter_distances(dist, idx)
    s = gaussian_similarity(h, sigma, squared)
    dinv = inv_sqrt_degree(s)
    l_v, l_h = hybrid_laplacian(l_in, s, alpha)
    cache = dict(
        f=f, idx=idx, q=q, m=m, g=g, pos=pos, top=top, scale=scale, fm=fm, dist=dist,
        h=h, s=s, dinv=dinv, alpha=alpha, sigma=sigma, squared=squared,
    )
    return ViewGraph(h, s, l_v, l_h), cache


def view_backward(d_lh, cache):
    """Gradients of the hybrid Laplacians with respect to ``q``, ``x`` and ``l_in``.

    ``d_lh`` has shape ``(N, n, n)``. Returns ``(dq, dx, dl_in)``.
    """
    c = cache
    dl_in = d_lh.sum(axis=0)
    # L_v = I - P,  P = a_i S_ij a_j
    dp = -c["alpha"] * d_lh
    s, a = c["s"], c["dinv"]
    ds = dp * a[:, :, None] * a[:, None, :]
    da = np.einsum("vij,vij,vj->vi", dp + np.swapaxes(dp, 1, 2), s, a)
    ddeg = da * (-0.5) * a ** 3
    ds += ddeg[:, :, None]
    # Gaussian kernel
    sig2 = c["sigma"] ** 2
    if c["squared"]:
        dh = ds * s * (-c["h"] / sig2)
    else:
        dh = ds * s * (-0.5 / sig2)
    idx = c["idx"]
    dd = dh[:, idx.rows, idx.cols] + dh[:, idx.cols, idx.rows]
    dt = dd / (2.0 * c["dist"])
    f = c["f"]
    # t_vc = f_c^T M_v f_c
    dm = np.swapaxes(f * dt[:, :, None], 1, 2) @ f
    df = 2.0 * (dt[:, :, None] * c["fm"]).sum(axis=0)
    # M = G / max(G), gradient routed through the argmax entry
    g, scale = c["g"], c["scale"]
    dg = dm / scale[:, None, None]
    dscale = -np.einsum("vij,vij->v", dm, g) / scale ** 2
    dgf = dg.reshape(dg.shape[0], -1)
    live = c["top"] > 0
    rows = np.arange(len(g))
    dgf[rows[live], c["pos"][live]] += dscale[live]
    q = c["q"]
    dq = (dg + np.swapaxes(dg, 1, 2)) @ q
    # F rows are x_i - x_j
    n = idx.n
    dx = np.zeros((n, f.shape[1]))
    np.add.at(dx, idx.rows, df)
    np.add.at(dx, idx.cols, -df)
    return dq, dx, dl_in
