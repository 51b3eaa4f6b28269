from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .numeric import DTYPE, check_symmetric


@dataclass(eq=False)
class Graph:
    """An undirected graph with a dense vertex-feature matrix and a class label.

    ``adjacency`` is binary, symmetric and has a zero diagonal. ``features``
    has one row per vertex.
    """

    adjacency: np.ndarray
    features: np.ndarray
    label: int = 0

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=DTYPE)
        self.features = np.asarray(self.features, dtype=DTYPE)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        a = self.adjacency
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"adjacency must be square, got {a.shape}")
        if self.features.shape[0] != a.shape[0]:
            raise ShapeError(
                f"features have {self.features.shape[0]} rows for {a.shape[0]} vertices"
            )
        if not np.array_equal(a, a.T):
            raise ShapeError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise ShapeError("adjacency must have a zero diagonal")
        if not np.all((a == 0) | (a == 1)):
            raise ShapeError("adjacency entries must be 0 or 1")
        self.label = int(self.label)

    @property
    def n(self):
        return self.adjacency.shape[0]

    @property
    def num_edges(self):
        return int(np.count_nonzero(np.triu(self.adjacency)))

    def with_features(self, features):
        return Graph(self.adjacency, features, self.label)

    def permuted(self, perm):
        perm = np.asarray(perm)
        return Graph(self.adjacency[np.ix_(perm, perm)], self.features[perm], self.label)

    def intrinsic_laplacian(self):
        return normalized_laplacian(self.adjacency)


def inv_sqrt_degree(weights):
    """``D^{-1/2}`` as a vector (or stack of vectors); zero-degree entries map to 0."""
    deg = weights.sum(axis=-1)
    out = np.zeros_like(deg)
    pos = deg > 0
    out[pos] = deg[pos] ** -0.5
    return out


def normalized_laplacian(weights):
    """``I - D^{-1/2} W D^{-1/2}`` for a symmetric nonnegative weight matrix.

    Accepts a single ``(n, n)`` matrix or a stack ``(..., n, n)``. Isolated
    vertices get an identity row.
    """
    w = np.asarray(weights, dtype=DTYPE)
    check_symmetric(w, name="weight matrix")
    if np.any(w < 0):
        raise DomainError("normalized_laplacian requires nonnegative weights")
    dinv = inv_sqrt_degree(w)
    n = w.shape[-1]
    return np.eye(n) - dinv[..., :, None] * w * dinv[..., None, :]


def rescale_laplacian(lap, lambda_max):
    """``(2 / lambda_max) L - I``; ``lambda_max`` may be an array over a stack."""
    lam = np.asarray(lambda_max, dtype=DTYPE)
    if np.any(lam <= 0):
        raise DomainError(f"lambda_max must be positive, got {lambda_max}")
    lap = np.asarray(lap, dtype=DTYPE)
    n = lap.shape[-1]
    return (2.0 / lam)[..., None, None] * lap - np.eye(n)
