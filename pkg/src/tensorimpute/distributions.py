"""Random sampling primitives with explicit generator state.

All draws consume a :class:`numpy.random.Generator`; identical seed plus
identical call sequence gives identical output.  Named substreams derive
independent generators from a single run seed.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import ParameterError
from .linalg import dense_cholesky

__all__ = [
    "named_rng",
    "sample_mvn_precision",
    "sample_gamma",
    "sample_wishart",
    "sample_inverse_wishart",
    "slice_sample_1d",
    "SLICE_SCALE",
    "MAX_SHRINK",
]

SLICE_SCALE = float(np.log(10.0))
MAX_SHRINK = 100


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Deterministic substream keyed by (seed, name).

    Consumers of different substreams never perturb each other.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))


def sample_mvn_precision(
    eta: np.ndarray, lam: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw from N(Lambda^{-1} eta, Lambda^{-1}) given the precision Lambda.

    The caller passes the full linear term eta, so the mean is
    Lambda^{-1} eta.  Uses the Cholesky factor of Lambda: the mean comes
    from two triangular solves and the noise from one back-substitution.
    """
    eta = np.asarray(eta, dtype=np.float64)
    chol = dense_cholesky(np.asarray(lam, dtype=np.float64))
    mean = chol.solve_t(chol.solve(eta))
    z = rng.standard_normal(eta.size)
    return mean + chol.solve_t(z)


def sample_gamma(a: float, b: float, rng: np.random.Generator) -> float:
    """Gamma(a, b) with shape/rate parameterization (mean a / b)."""
    if a <= 0 or b <= 0:
        raise ParameterError(f"gamma parameters must be positive, got a={a}, b={b}")
    return float(rng.gamma(a, 1.0 / b))


def _bartlett_factor(order: int, nu: float, rng: np.random.Generator) -> np.ndarray:
    A = np.zeros((order, order))
    for i in range(order):
        A[i, i] = np.sqrt(rng.chisquare(nu - i))
        A[i, :i] = rng.standard_normal(i)
    return A


def sample_wishart(psi: np.ndarray, nu: float, rng: np.random.Generator) -> np.ndarray:
    """Wishart draw with scale psi and nu degrees of freedom (mean nu * psi).

    Uses the Bartlett decomposition; the result is exactly symmetric.
    """
    psi = np.asarray(psi, dtype=np.float64)
    p = psi.shape[0]
    if nu < p:
        raise ParameterError(f"wishart needs nu >= order, got nu={nu}, order={p}")
    L = dense_cholesky(psi).L
    A = _bartlett_factor(p, float(nu), rng)
    LA = L @ A
    out = LA @ LA.T
    return 0.5 * (out + out.T)


def sample_inverse_wishart(psi: np.ndarray, nu: float, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart draw with scale matrix psi (K^{-1} ~ Wishart(psi^{-1}, nu))."""
    psi = np.asarray(psi, dtype=np.float64)
    p = psi.shape[0]
    if nu < p:
        raise ParameterError(f"inverse wishart needs nu >= order, got nu={nu}, order={p}")
    chol = dense_cholesky(psi)
    psi_inv = chol.solve_full(np.eye(p))
    w = sample_wishart(0.5 * (psi_inv + psi_inv.T), nu, rng)
    out = np.linalg.inv(w)
    return 0.5 * (out + out.T)


def slice_sample_1d(
    log_density: Callable[[float], float],
    x0: float,
    rng: np.random.Generator,
    scale: float = SLICE_SCALE,
    max_shrink: int = MAX_SHRINK,
) -> tuple[float, bool]:
    """One slice-sampling update with a fixed-width bracket and shrinkage.

    A bracket of width ``scale`` is placed uniformly around ``x0``, a
    single slice level eta ~ U(0, 1) is drawn, and uniform proposals are
    accepted once the density ratio against ``x0`` exceeds eta; rejected
    proposals shrink the bracket toward ``x0``.  Non-finite proposals are
    treated as rejections.  Returns ``(x0, False)`` if ``max_shrink``
    rejections occur, so the chain can stay put instead of hanging.
    """
    f0 = log_density(x0)
    if not np.isfinite(f0):
        raise ParameterError(f"log_density must be finite at the current point, got {f0}")
    gamma = rng.uniform(0.0, scale)
    x_min = x0 - gamma
    x_max = x_min + scale
    log_eta = float(np.log(rng.uniform(0.0, 1.0)))
    for _ in range(max_shrink):
        x = rng.uniform(x_min, x_max)
        fx = log_density(x)
        if np.isfinite(fx) and fx - f0 > log_eta:
            return float(x), True
        if x < x0:
            x_min = x
        else:
            x_max = x
    return float(x0), False
