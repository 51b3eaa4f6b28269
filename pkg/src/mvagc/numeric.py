"""Dense float64 kernels and seeded randomness shared by the rest of the package.

Matrices are plain ``numpy.ndarray`` objects (row-major, float64). The helpers
here add the shape checks and error types the higher layers rely on.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

DTYPE = np.float64

POWER_ITERS = 200
POWER_TOL = 1e-8
POWER_SEED = 20200711


def as_matrix(a):
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def make_rng(seed):
    """Bit-reproducible generator (PCG64) for a 64-bit integer seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def matmul(a, b):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def hadamard(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def elem_stats(a):
    """Mean and population standard deviation over every element of ``a``."""
    a = np.asarray(a, dtype=DTYPE)
    if a.size == 0:
        raise DomainError("elem_stats of an empty matrix")
    mean = float(a.mean())
    std = float(np.sqrt(np.mean((a - mean) ** 2)))
    return mean, std


def check_symmetric(a, tol=1e-10, name="matrix"):
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")
    err = np.max(np.abs(a - np.swapaxes(a, -1, -2))) if a.size else 0.0
    if err > tol:
        raise ShapeError(f"{name} is not symmetric (max asymmetry {err:.3g})")


@dataclass(frozen=True)
class PowerResult:
    value: float
    converged: bool
    iterations: int


def _start_vector(n):
    v = make_rng(POWER_SEED).random(n) + 0.5
    return v / np.linalg.norm(v)


def spectral_radius_batch(stack, iters=POWER_ITERS, tol=POWER_TOL):
    """Power iteration on a stack of symmetric matrices of shape ``(..., n, n)``.

    Returns ``(values, converged, iterations)`` arrays over the leading
    dimensions. A matrix is converged once two successive Rayleigh quotients
    differ by less than ``tol``; unconverged entries hold their last estimate.
    """
    stack = np.asarray(stack, dtype=DTYPE)
    lead = stack.shape[:-2]
    n = stack.shape[-1]
    mats = stack.reshape((-1, n, n))
    b = mats.shape[0]
    v = np.broadcast_to(_start_vector(n), (b, n)).copy()
    values = np.zeros(b)
    converged = np.zeros(b, dtype=bool)
    its = np.zeros(b, dtype=np.int64)
    prev = np.full(b, np.inf)
    active = np.arange(b)
    for _ in range(iters):
        its[active] += 1
        w = np.einsum("bij,bj->bi", mats[active], v[active])
        rq = np.einsum("bi,bi->b", v[active], w)
        norms = np.linalg.norm(w, axis=1)
        values[active] = np.abs(rq)
        done = np.abs(rq - prev[active]) < tol
        zero = norms == 0.0
        done |= zero
        prev[active] = rq
        safe = np.where(zero, 1.0, norms)
        v[active] = np.where(zero[:, None], v[active], w / safe[:, None])
        converged[active[done]] = True
        active = active[~done]
        if active.size == 0:
            break
    return values.reshape(lead), converged.reshape(lead), its.reshape(lead)


def spectral_radius_max(symmetric, iters=POWER_ITERS, tol=POWER_TOL):
    """Largest eigenvalue magnitude of a symmetric matrix by power iteration."""
    a = np.asarray(symmetric, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    check_symmetric(a)
    values, converged, its = spectral_radius_batch(a[None], iters=iters, tol=tol)
    return PowerResult(float(values[0]), bool(converged[0]), int(its[0]))
