"""Kernel and taper functions plus dense / sparse covariance assembly.

Factor priors use dense covariances built from a stationary kernel on a
1-D coordinate set (or a user-supplied precomputed matrix).  The local
short-range component uses the same kernels multiplied by a compactly
supported taper, which makes the covariance sparse with exact zeros
beyond the taper range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError, ValidationError

__all__ = [
    "KernelSpec",
    "TaperSpec",
    "kernel_eval",
    "taper_eval",
    "build_factor_covariance",
    "build_tapered_covariance",
    "DEFAULT_JITTER",
]

DEFAULT_JITTER = 1e-6

KERNEL_FAMILIES = ("squared-exponential", "matern-3/2", "white", "precomputed")
TAPER_FAMILIES = ("bohman", "wendland")


@dataclass
class KernelSpec:
    """Stationary kernel description.

    ``lengthscale`` doubles as the initial value when the length-scale is
    later sampled.  ``variance`` is fixed to 1 for factor priors and local
    base kernels; the magnitude of those components is carried elsewhere.
    For ``family="precomputed"`` the covariance matrix is supplied
    directly and the other fields are ignored.
    """

    family: str = "squared-exponential"
    lengthscale: float = 1.0
    variance: float = 1.0
    matrix: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.family not in KERNEL_FAMILIES:
            raise ParameterError(f"unknown kernel family {self.family!r}")
        if self.family != "precomputed":
            if self.lengthscale <= 0:
                raise ParameterError(f"lengthscale must be > 0, got {self.lengthscale}")
            if self.variance <= 0:
                raise ParameterError(f"variance must be > 0, got {self.variance}")
        elif self.matrix is None:
            raise ParameterError("precomputed kernel requires a matrix")

    @property
    def has_lengthscale(self) -> bool:
        """Whether the length-scale is a live parameter worth sampling."""
        return self.family in ("squared-exponential", "matern-3/2")

    def with_lengthscale(self, lengthscale: float) -> "KernelSpec":
        return KernelSpec(self.family, lengthscale, self.variance, self.matrix)


@dataclass
class TaperSpec:
    """Compactly supported correlation function with range ``range_`` > 0."""

    family: str = "bohman"
    range_: float = 10.0

    def __post_init__(self) -> None:
        if self.family not in TAPER_FAMILIES:
            raise ParameterError(f"unknown taper family {self.family!r}")
        if self.range_ <= 0:
            raise ParameterError(f"taper range must be > 0, got {self.range_}")


def kernel_eval(spec: KernelSpec, h):
    """Evaluate the kernel at distance(s) h >= 0."""
    h = np.asarray(h, dtype=np.float64)
    if spec.family == "squared-exponential":
        return spec.variance * np.exp(-0.5 * (h / spec.lengthscale) ** 2)
    if spec.family == "matern-3/2":
        a = np.sqrt(3.0) * h / spec.lengthscale
        return spec.variance * (1.0 + a) * np.exp(-a)
    if spec.family == "white":
        return spec.variance * (h == 0.0).astype(np.float64)
    raise ParameterError(f"kernel family {spec.family!r} has no pointwise form")


def taper_eval(spec: TaperSpec, delta):
    """Evaluate the taper at distance(s) delta >= 0; exactly 0 for delta >= range."""
    delta = np.asarray(delta, dtype=np.float64)
    u = delta / spec.range_
    inside = u < 1.0
    if spec.family == "bohman":
        vals = (1.0 - u) * np.cos(np.pi * u) + np.sin(np.pi * u) / np.pi
    else:  # wendland
        vals = (1.0 - u) ** 4 * (1.0 + 4.0 * u)
    return np.where(inside, vals, 0.0)


def build_factor_covariance(
    coords: np.ndarray,
    spec: KernelSpec,
    jitter: float = DEFAULT_JITTER,
) -> np.ndarray:
    """Dense covariance K[i,j] = k(|coords_i - coords_j|) + jitter on the diagonal.

    For ``family="precomputed"`` the supplied matrix is validated
    (square, right size, symmetric) and returned with jitter added.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.size
    if spec.family == "precomputed":
        K = np.asarray(spec.matrix, dtype=np.float64)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValidationError(f"precomputed covariance must be square, got {K.shape}")
        if K.shape[0] != n:
            raise ValidationError(f"precomputed covariance is {K.shape[0]}x{K.shape[0]}, expected {n}")
        if not np.allclose(K, K.T, rtol=0.0, atol=1e-12):
            raise ValidationError("precomputed covariance is not symmetric")
        return K + jitter * np.eye(n)
    h = np.abs(coords[:, None] - coords[None, :])
    K = kernel_eval(spec, h)
    K = 0.5 * (K + K.T)  # kill rounding asymmetry
    return K + jitter * np.eye(n)


def build_tapered_covariance(
    coords: np.ndarray,
    base: KernelSpec,
    taper: TaperSpec,
) -> sp.csr_matrix:
    """Sparse covariance with entries k(delta) * taper(delta).

    Pairs with delta >= taper range are structurally absent.  The result
    is positive semidefinite (Schur product of PSD matrices); no jitter
    is added here, factorization routines handle that.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.size
    order = np.argsort(coords, kind="stable")
    sorted_coords = coords[order]

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    # sweep over sorted coordinates; neighbors within the taper range form a window
    hi = 0
    for pos in range(n):
        if hi < pos + 1:
            hi = pos + 1
        while hi < n and sorted_coords[hi] - sorted_coords[pos] < taper.range_:
            hi += 1
        idx = np.arange(pos, hi)
        delta = sorted_coords[idx] - sorted_coords[pos]
        v = kernel_eval(base, delta) * taper_eval(taper, delta)
        i = order[pos]
        j = order[idx]
        rows.append(np.full(idx.size, i))
        cols.append(j)
        vals.append(v)
        # mirror the strict upper part for symmetry
        rows.append(j[1:])
        cols.append(np.full(idx.size - 1, i))
        vals.append(v[1:])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return mat.tocsr()
