"""Third-order tensor container, unfoldings, vectorization and CP reconstruction.

Every module in the package shares one ordering convention: mode-k
unfoldings and vectorization follow the column-major (Kolda-Bader)
layout, so for mode 1 the column index of entry (m, t, p) is
t + p*T (0-based).  With this convention ``vectorize`` agrees with the
ordering assumed by the Kronecker products in :mod:`tensorimpute.linalg`:
a covariance of the vectorized tensor factorizes as K3 (x) K2 (x) K1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError

__all__ = [
    "SpatioTensor",
    "CPFactors",
    "unfold",
    "fold",
    "vectorize",
    "unvectorize",
    "project_omega",
    "scatter_omega",
    "cp_reconstruct",
]


@dataclass
class SpatioTensor:
    """Dense (M, T, P) data array plus an observation mask.

    The mask is authoritative: entries with ``mask == False`` are stored
    as NaN and are never read by inference.  Observed entries must be
    finite.
    """

    values: np.ndarray
    mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DimensionError(f"expected a third-order tensor, got shape {self.values.shape}")
        if self.mask is None:
            self.mask = ~np.isnan(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise DimensionError(
                f"mask shape {self.mask.shape} != values shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValidationError("observed entries contain NaN/inf; mask and payload disagree")
        # enforce the sentinel so unobserved values can never leak into sums
        self.values = self.values.copy()
        self.values[~self.mask] = np.nan

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with unobserved entries replaced by ``fill``."""
        out = np.where(self.mask, self.values, fill)
        return out

    def copy(self) -> "SpatioTensor":
        return SpatioTensor(self.values.copy(), self.mask.copy())


@dataclass
class CPFactors:
    """Factor matrices of a rank-D CP decomposition."""

    U: np.ndarray  # (M, D)
    V: np.ndarray  # (T, D)
    W: np.ndarray  # (P, D)

    def __post_init__(self) -> None:
        self.U = np.atleast_2d(np.asarray(self.U, dtype=np.float64))
        self.V = np.atleast_2d(np.asarray(self.V, dtype=np.float64))
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        if not (self.U.shape[1] == self.V.shape[1] == self.W.shape[1]):
            raise DimensionError(
                "factor matrices disagree on rank: "
                f"{self.U.shape[1]}, {self.V.shape[1]}, {self.W.shape[1]}"
            )

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.U.shape[0], self.V.shape[0], self.W.shape[0])


def unfold(values: np.ndarray, mode: int) -> np.ndarray:
    """Mode-k unfolding (k in {1, 2, 3}) of a third-order array."""
    if mode not in (1, 2, 3):
        raise DimensionError(f"mode must be 1, 2 or 3, got {mode}")
    values = np.asarray(values)
    if values.ndim != 3:
        raise DimensionError(f"expected a third-order array, got shape {values.shape}")
    moved = np.moveaxis(values, mode - 1, 0)
    return moved.reshape((values.shape[mode - 1], -1), order="F")


def fold(mat: np.ndarray, mode: int, dims: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`unfold`: rebuild the (M, T, P) array."""
    if mode not in (1, 2, 3):
        raise DimensionError(f"mode must be 1, 2 or 3, got {mode}")
    rest = [dims[k] for k in range(3) if k != mode - 1]
    mat = np.asarray(mat)
    if mat.shape != (dims[mode - 1], rest[0] * rest[1]):
        raise DimensionError(f"cannot fold shape {mat.shape} into dims {dims} along mode {mode}")
    arr = mat.reshape((dims[mode - 1], *rest), order="F")
    return np.moveaxis(arr, 0, mode - 1)


def vectorize(values: np.ndarray) -> np.ndarray:
    """Stack the columns of the mode-1 unfolding into one vector."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise DimensionError(f"expected a third-order array, got shape {values.shape}")
    return values.reshape(-1, order="F")


def unvectorize(vec: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    vec = np.asarray(vec)
    if vec.size != dims[0] * dims[1] * dims[2]:
        raise DimensionError(f"vector of length {vec.size} cannot fill dims {dims}")
    return vec.reshape(dims, order="F")


def project_omega(vec: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Restrict a full-length vector to the observed index set."""
    vec = np.asarray(vec)
    mask_vec = vectorize(np.asarray(mask, dtype=bool))
    if vec.size != mask_vec.size:
        raise DimensionError(f"vector length {vec.size} != tensor size {mask_vec.size}")
    return vec[mask_vec]


def scatter_omega(sub: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Place an observed-subset vector back on the full grid, zeros elsewhere."""
    sub = np.asarray(sub)
    mask_vec = vectorize(np.asarray(mask, dtype=bool))
    n_obs = int(mask_vec.sum())
    if sub.size != n_obs:
        raise DimensionError(f"subvector length {sub.size} != number of observed entries {n_obs}")
    out = np.zeros(mask_vec.size, dtype=np.float64)
    out[mask_vec] = sub
    return out


def cp_reconstruct(factors: CPFactors) -> np.ndarray:
    """Dense (M, T, P) array x(m,t,p) = sum_d U[m,d] V[t,d] W[p,d]."""
    M, T, P = factors.dims
    if factors.rank == 0:
        return np.zeros((M, T, P))
    return np.einsum("md,td,pd->mtp", factors.U, factors.V, factors.W)
