"""Chebyshev-approximated spectral filtering, one filter per view."""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .graph import rescale_laplacian
from .numeric import DTYPE, spectral_radius_batch
from .views import median_sigma, view_backward, view_forward


@dataclass(eq=False)
class ChebyshevBasis:
    order: int
    terms: list
    rescaled_laplacian: np.ndarray


@dataclass(eq=False)
class ViewSignal:
    x_v: np.ndarray
    theta: np.ndarray


def _recurrence(x, lt, k):
    """Terms ``T_p(lt) x`` for p < k; ``lt`` may carry leading view axes."""
    lead = lt.shape[:-2]
    terms = [np.broadcast_to(x, lead + x.shape)]
    if k > 1:
        terms.append(lt @ x)
    for _ in range(2, k):
        terms.append(2.0 * (lt @ terms[-1]) - terms[-2])
    return terms


def chebyshev_terms(x, l_h, k, lambda_max):
    if k < 1:
        raise DomainError(f"Chebyshev order must be >= 1, got {k}")
    x = np.asarray(x, dtype=DTYPE)
    lt = rescale_laplacian(l_h, lambda_max)
    if lt.shape[-1] != x.shape[0]:
        raise ShapeError(f"Laplacian {lt.shape} does not match signal {x.shape}")
    terms = [np.array(t) for t in _recurrence(x, lt, k)]
    return ChebyshevBasis(k, terms, lt)


def project_signal(basis, theta):
    """Concatenate ``theta_p * T_p`` over orders into an ``n x K*d`` signal."""
    theta = np.asarray(theta, dtype=DTYPE)
    if theta.shape != (basis.order,):
        raise ShapeError(f"theta has shape {theta.shape}, expected ({basis.order},)")
    return np.concatenate([t * c for t, c in zip(basis.terms, theta)], axis=1)


def lambda_estimates(l_h, bound, mode="power"):
    """Per-view largest eigenvalue used to rescale each hybrid Laplacian.

    ``mode="eigh"`` takes the top eigenvalue from a dense symmetric
    eigensolver. ``mode="power"`` runs power iteration and falls back to
    ``bound`` when it does not converge; ``mode="bound"`` always uses ``bound``.
    """
    nviews = l_h.shape[0]
    if mode == "bound":
        return np.full(nviews, float(bound))
    if mode == "eigh":
        top = np.linalg.eigvalsh(l_h)[:, -1]
        return np.where(top > 0, top, float(bound))
    if mode != "power":
        raise DomainError(f"unknown lambda mode {mode!r}")
    values, converged, _ = spectral_radius_batch(l_h)
    ok = converged & (values > 0)
    return np.where(ok, values, float(bound))


def check_sigma(sigma):
    if sigma == "median":
        return
    if isinstance(sigma, str) or not sigma > 0:
        raise DomainError(f"sigma must be positive or 'median', got {sigma!r}")


def resolve_sigma(sigma, x):
    """A fixed kernel width, or ``"median"``: the median pairwise distance of ``x``."""
    return median_sigma(x) if sigma == "median" else float(sigma)


def mvgc_apply(x, l_in, layer, lambdas=None, l_in_bound=2.0, sigma=None):
    """Vectorized multi-view graph convolution.

    Returns ``(z, l_h, lambdas, cache)`` where ``z`` has shape
    ``(N, n, K*d)`` and ``l_h`` stacks the N hybrid Laplacians. ``sigma``
    overrides the layer's kernel width (a data-derived width is a constant
    for backprop, so gradient checks pass the unperturbed value back in).
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[1] != layer.in_dim:
        raise ShapeError(f"signal has {x.shape[1]} features, layer expects {layer.in_dim}")
    if sigma is None:
        sigma = resolve_sigma(layer.sigma, x)
    vg, vcache = view_forward(
        x, l_in, layer.q, alpha=layer.alpha, sigma=sigma, squared=layer.squared_kernel
    )
    l_h = vg.l_hybrid
    bound = l_in_bound + 2.0 * layer.alpha
    if lambdas is None:
        lambdas = lambda_estimates(l_h, bound, layer.lambda_mode)
    lt = rescale_laplacian(l_h, lambdas)
    k = layer.k_order
    terms = np.stack(_recurrence(x, lt, k), axis=1)  # (N, K, n, d)
    nv, _, n, d = terms.shape
    scaled = terms * layer.theta[:, :, None, None]
    z = scaled.transpose(0, 2, 1, 3).reshape(nv, n, k * d)
    cache = dict(x=x, terms=terms, lt=lt, lambdas=lambdas, vcache=vcache, theta=layer.theta)
    return z, l_h, lambdas, cache


def mvgc_backward(dz, cache, dl_h=None):
    """Returns ``(dq, dtheta, dx, dl_in)`` given the gradient of ``z``.

    ``dl_h`` is any gradient reaching the hybrid Laplacians from downstream
    (the next block consumes one of them).
    """
    terms, lt, x = cache["terms"], cache["lt"], cache["x"]
    nv, k, n, d = terms.shape
    dzt = dz.reshape(nv, n, k, d).transpose(0, 2, 1, 3)
    dtheta = np.einsum("vknd,vknd->vk", dzt, terms)
    dterms = dzt * cache["theta"][:, :, None, None]
    dlt = np.zeros_like(lt)
    lt_t = np.swapaxes(lt, 1, 2)
    for p in range(k - 1, 1, -1):
        dlt += 2.0 * (dterms[:, p] @ np.swapaxes(terms[:, p - 1], 1, 2))
        dterms[:, p - 1] += 2.0 * (lt_t @ dterms[:, p])
        dterms[:, p - 2] -= dterms[:, p]
    dx = dterms[:, 0].sum(axis=0)
    if k > 1:
        dlt += dterms[:, 1] @ x.T
        dx = dx + (lt_t @ dterms[:, 1]).sum(axis=0)
    dl_total = dlt * (2.0 / cache["lambdas"])[:, None, None]
    if dl_h is not None:
        dl_total = dl_total + dl_h
    dq, dx_view, dl_in = view_backward(dl_total, cache["vcache"])
    return dq, dtheta, dx + dx_view, dl_in


def mvgc_forward(x, l_in, layer, lambdas=None):
    """Per-view projected signals and the matching hybrid Laplacians, in view order."""
    z, l_h, _, _ = mvgc_apply(x, l_in, layer, lambdas=lambdas)
    signals = [ViewSignal(z[v], layer.theta[v].copy()) for v in range(z.shape[0])]
    return signals, [l_h[v] for v in range(l_h.shape[0])]
