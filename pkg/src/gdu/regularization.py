"""Regularization terms for the gated domain layer.

* ``omega_ols``  - mean squared RKHS reconstruction error of each sample's
  feature map by the gate-weighted basis embeddings (kernel-trick expansion).
* ``omega_orth`` - orthogonality penalties on the basis Gram matrix:
  soft orthogonality ``SO = ||K - I||_F^2``, spectral restricted isometry
  ``SRIP = ||K - I||_2`` (power iteration), and mutual coherence
  ``MC = max_{i != j} |K_ij|``.
* ``omega_l1``   - batch-mean L1 norm of the gating coefficients.

``omega_total`` combines them per gating mode: geometry modes use
``lambda_ols * OLS + lambda_l1 * L1``; projection mode uses
``lambda_ols * OLS + lambda_orth * ORTH``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layer import (
    GEOMETRY_MODES,
    GduLayer,
    _as_beta_array,
    _basis_inners,
    basis_gram_matrix,
)

__all__ = [
    "ORTH_VARIANTS",
    "RegConfig",
    "omega_ols",
    "gram_bases",
    "omega_orth",
    "omega_l1",
    "omega_total",
    "srip_power_iteration",
]

ORTH_VARIANTS = ("SO", "SRIP", "MC")

_OLS_CLAMP_TOL = 1e-10
# Basis Gram matrices routinely have near-tied leading eigenvalues, where
# power iteration converges slowly; the cap and threshold are sized so the
# estimate agrees with a dense eigensolver to well below 1e-8 on M <= 10.
_SRIP_MAX_ITER = 20_000
_SRIP_REL_TOL = 1e-13


@dataclass(frozen=True)
class RegConfig:
    """Weights for the regularization terms; all must be nonnegative."""

    lambda_ols: float = 0.0
    lambda_orth: float = 0.0
    lambda_l1: float = 0.0
    orth_variant: str = "SRIP"

    def __post_init__(self):
        for name in ("lambda_ols", "lambda_orth", "lambda_l1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.orth_variant not in ORTH_VARIANTS:
            raise ValueError(f"unknown orthogonality variant {self.orth_variant!r}")


def gram_bases(layer: GduLayer):
    """Gram matrix of the basis embeddings, ``K[i, j] = <mu_i, mu_j>``."""
    return basis_gram_matrix(layer)


def _omega_ols_from_stats(a, k_bases, beta):
    """Reconstruction error from precomputed embedding inner products."""
    cross = ad.mean(ad.summation(beta * a, axis=1))
    quad = ad.mean(ad.summation((beta @ k_bases) * beta, axis=1))
    raw = 1.0 - 2.0 * cross + quad
    val = float(ad.value_of(raw))
    if val < -_OLS_CLAMP_TOL:
        raise ValueError(f"reconstruction error evaluated to {val}; expected >= 0")
    if val < 0.0:
        return ad.maximum(raw, 0.0)
    return raw


def omega_ols(X, beta, layer: GduLayer):
    """Mean squared RKHS reconstruction error over the batch.

    Expands ``||phi(x_i) - sum_j beta_ij mu_j||^2`` via the kernel trick:
    ``k(x_i, x_i) - 2 sum_j beta_ij <phi(x_i), mu_j>
    + sum_{j,l} beta_ij beta_il <mu_j, mu_l>`` with ``k(x, x) = 1``.
    """
    beta = _as_beta_array(beta)
    bshape = ad.value_of(beta).shape
    b = ad.value_of(X).shape[0]
    if bshape != (b, layer.num_bases):
        raise ValueError(
            f"beta shape {bshape} does not match batch {b} x {layer.num_bases}"
        )
    a, _ = _basis_inners(X, layer)
    return _omega_ols_from_stats(a, gram_bases(layer), beta)


def srip_power_iteration(A: np.ndarray) -> float:
    """Spectral norm of a symmetric matrix by power iteration.

    Iterates simultaneously from deterministic starts (normalized all-ones
    plus every coordinate axis, since the all-ones vector can be orthogonal
    to the dominant eigenvector) and returns the largest estimate
    ``||A u||``, which is robust to sign-symmetric spectra where the
    iterate itself oscillates. Stops when every start's estimate has
    stabilized to relative changes below 1e-13, or after 20,000 iterations.
    """
    A = np.asarray(A, dtype=np.float64)
    m = A.shape[0]
    U = np.concatenate([np.full((m, 1), 1.0 / np.sqrt(m)), np.eye(m)], axis=1)
    estimates = np.linalg.norm(A @ U, axis=0)
    for _ in range(_SRIP_MAX_ITER):
        V = A @ U
        norms = np.linalg.norm(V, axis=0)
        alive = norms > 0.0
        if not alive.any():
            break
        U = np.where(alive, V / np.where(alive, norms, 1.0), U)
        new_estimates = np.linalg.norm(A @ U, axis=0)
        done = np.abs(new_estimates - estimates) <= _SRIP_REL_TOL * np.maximum(
            new_estimates, 1e-300
        )
        estimates = new_estimates
        if done.all():
            break
    return float(estimates.max())


def omega_orth(K, variant: str):
    """Orthogonality penalty on a basis Gram matrix."""
    if variant not in ORTH_VARIANTS:
        raise ValueError(f"unknown orthogonality variant {variant!r}")
    shape = ad.value_of(K).shape
    if len(shape) != 2 or shape[0] != shape[1]:
        raise ValueError(f"expected a square Gram matrix, got shape {shape}")
    m = shape[0]
    eye = np.eye(m)
    if variant == "SO":
        diff = K - eye
        return ad.summation(diff * diff)
    if variant == "SRIP":
        if ad.is_tensor(K):
            # Differentiable path: dense eigendecomposition with the exact
            # dominant-eigenpair gradient. Agrees with power iteration to
            # well below 1e-8 on the matrices arising here.
            return ad.spectral_norm_sym(K - eye)
        return srip_power_iteration(np.asarray(K, dtype=np.float64) - eye)
    # MC: largest absolute off-diagonal entry.
    if m == 1:
        return 0.0
    off = ad.absolute(K) * (1.0 - eye)
    return ad.amax(off)


def omega_l1(beta):
    """Batch-mean L1 norm of the gating coefficients."""
    beta = _as_beta_array(beta)
    return ad.mean(ad.summation(ad.absolute(beta), axis=1))


def omega_total(X, beta, layer: GduLayer, cfg: RegConfig):
    """Mode-appropriate combination of the regularization terms."""
    total = 0.0
    if cfg.lambda_ols > 0.0:
        total = total + cfg.lambda_ols * omega_ols(X, beta, layer)
    if layer.mode in GEOMETRY_MODES:
        if cfg.lambda_l1 > 0.0:
            total = total + cfg.lambda_l1 * omega_l1(beta)
    else:
        if cfg.lambda_orth > 0.0:
            total = total + cfg.lambda_orth * omega_orth(
                gram_bases(layer), cfg.orth_variant
            )
    return total
