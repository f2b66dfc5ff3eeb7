"""Gaussian kernel evaluation, Gram matrices, and bandwidth selection.

The kernel is fixed to the Gaussian ``k(x, y) = exp(-||x - y||^2 / (2 sigma^2))``,
matching the squared-bandwidth convention of the median heuristic
``sigma^2 = median{||x_i - x_j||^2}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "KernelConfig",
    "DimensionMismatchError",
    "DegenerateDataError",
    "gaussian_kernel",
    "gram",
    "median_heuristic",
]


class DimensionMismatchError(ValueError):
    """Raised when two inputs disagree on their feature dimension."""


class DegenerateDataError(ValueError):
    """Raised when data admits no usable bandwidth (all rows identical)."""


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel bandwidth ``sigma > 0``."""

    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be a positive finite real, got {self.sigma}")


def _check_feature_dims(name_a, dim_a, name_b, dim_b):
    if dim_a != dim_b:
        raise DimensionMismatchError(
            f"{name_a} has dimension {dim_a} but {name_b} has dimension {dim_b}"
        )


def gaussian_kernel(x, y, cfg: KernelConfig) -> float:
    """Evaluate ``k(x, y)`` for two vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("gaussian_kernel expects 1-D vectors")
    _check_feature_dims("x", x.shape[0], "y", y.shape[0])
    d2 = float(np.sum((x - y) ** 2))
    return math.exp(-d2 / (2.0 * cfg.sigma**2))


def squared_distances(X, Y):
    """Pairwise squared Euclidean distances between rows of X and rows of Y."""
    xx = ad.summation(X * X, axis=1, keepdims=True)
    yy = ad.summation(Y * Y, axis=1, keepdims=True)
    cross = X @ ad.transpose(Y)
    d2 = xx + ad.transpose(yy) - 2.0 * cross
    # Floating-point cancellation can leave tiny negatives on the diagonal.
    return ad.maximum(d2, 0.0)


def gram(X, Y, cfg: KernelConfig):
    """Kernel matrix ``G[i, j] = k(X_i, Y_j)``.

    Accepts numpy arrays or autodiff tensors; the result type follows the
    inputs.
    """
    xs, ys = ad.value_of(X).shape, ad.value_of(Y).shape
    if len(xs) != 2 or len(ys) != 2:
        raise ValueError("gram expects 2-D row matrices")
    _check_feature_dims("X", xs[1], "Y", ys[1])
    return ad.exp(squared_distances(X, Y) / (-2.0 * cfg.sigma**2))


def median_heuristic(X) -> float:
    """Bandwidth from the median of squared pairwise distances.

    Uses distinct unordered pairs ``i < j`` and returns
    ``sigma = sqrt(median)``. Even-length medians are the arithmetic mean of
    the two central values.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("median_heuristic expects an (n, e) matrix")
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"median_heuristic needs at least two rows, got {n}")
    d2 = np.asarray(squared_distances(X, X))
    pairs = d2[np.triu_indices(n, k=1)]
    med = float(np.median(pairs))
    if med <= 0.0:
        raise DegenerateDataError("degenerate data, zero bandwidth")
    return math.sqrt(med)
