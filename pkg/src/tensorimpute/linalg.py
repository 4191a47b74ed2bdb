"""Sparse/dense Cholesky wrappers, Kronecker matvecs, PCG and Woodbury identities.

All covariance square roots are exposed through one small duck-typed
interface (``apply`` / ``apply_t`` / ``solve`` / ``solve_t`` on matrices,
plus ``logdet`` and ``matrix``) so that sparse tapered covariances, dense
variable covariances and scalar-diagonal covariances share the same code
paths in the samplers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu, spsolve_triangular

from .errors import DimensionError, FactorizationError

__all__ = [
    "SparseChol",
    "DenseChol",
    "ScaledIdentityChol",
    "ScaledIdentity",
    "sparse_cholesky",
    "dense_cholesky",
    "kron_matvec",
    "kron_mode_apply",
    "pcg_solve",
    "PcgResult",
    "ImplicitH",
    "woodbury_inner_chol",
    "woodbury_solve",
    "woodbury_logdet",
    "woodbury_quadform",
    "JITTER_LADDER",
]

JITTER_LADDER = (1e-6, 1e-4)


class ScaledIdentity:
    """c * I_n that can stand in for a (sparse) matrix in Kronecker products."""

    def __init__(self, n: int, scale: float):
        self.n = int(n)
        self.scale = float(scale)
        self.shape = (self.n, self.n)

    def __matmul__(self, other):
        return self.scale * np.asarray(other)

    def toarray(self) -> np.ndarray:
        return self.scale * np.eye(self.n)

    def diagonal(self) -> np.ndarray:
        return np.full(self.n, self.scale)


@dataclass
class SparseChol:
    """Cholesky-type factorization of a sparse symmetric matrix.

    Stores a lower-triangular factor ``L`` and a fill-reducing permutation
    ``perm`` such that ``A[q][:, q] = L @ L.T`` with ``q = argsort(perm)``
    and ``A`` the (jittered) input.  The effective square root is the
    row-permuted factor ``W = L[perm]`` with ``W @ W.T = A``.
    """

    L: sp.csr_matrix
    perm: np.ndarray
    jitter_used: float
    _iperm: np.ndarray = field(init=False)
    _W: sp.csr_matrix = field(init=False)
    _Lt: sp.csr_matrix = field(init=False)

    def __post_init__(self) -> None:
        self.perm = np.asarray(self.perm)
        self._iperm = np.argsort(self.perm)
        self._W = self.L[self.perm].tocsr()
        self._Lt = self.L.T.tocsr()

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.L.shape

    @property
    def matrix(self) -> sp.csr_matrix:
        """The square root W (A = W @ W.T) as a concrete sparse matrix."""
        return self._W

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(self.L.diagonal())))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._W @ x

    def apply_t(self, x: np.ndarray) -> np.ndarray:
        return self._Lt @ np.asarray(x)[self._iperm]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """W^{-1} b (columnwise for 2-D b)."""
        b = np.asarray(b, dtype=np.float64)
        return spsolve_triangular(self.L, b[self._iperm], lower=True)

    def solve_t(self, b: np.ndarray) -> np.ndarray:
        """W^{-T} b (columnwise for 2-D b)."""
        b = np.asarray(b, dtype=np.float64)
        return spsolve_triangular(self._Lt, b, lower=False)[self.perm]

    def solve_full(self, b: np.ndarray) -> np.ndarray:
        """A^{-1} b via the two triangular solves."""
        return self.solve_t(self.solve(b))


@dataclass
class DenseChol:
    """Lower Cholesky factor of a dense SPD matrix (A = L @ L.T)."""

    L: np.ndarray
    jitter_used: float = 0.0

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.L.shape

    @property
    def matrix(self) -> np.ndarray:
        return self.L

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.L @ x

    def apply_t(self, x: np.ndarray) -> np.ndarray:
        return self.L.T @ x

    def solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.solve_triangular(self.L, b, lower=True)

    def solve_t(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.solve_triangular(self.L.T, b, lower=False)

    def solve_full(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve((self.L, True), b)


class ScaledIdentityChol:
    """Square root of c * I_n; fast path for scalar-diagonal covariances."""

    def __init__(self, n: int, variance: float):
        if variance <= 0:
            raise FactorizationError(f"scaled identity needs variance > 0, got {variance}")
        self.n = int(n)
        self.variance = float(variance)
        self.root = float(np.sqrt(variance))
        self.jitter_used = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @property
    def matrix(self) -> ScaledIdentity:
        return ScaledIdentity(self.n, self.root)

    def logdet(self) -> float:
        return self.n * float(np.log(self.variance))

    def apply(self, x):
        return self.root * np.asarray(x)

    def apply_t(self, x):
        return self.root * np.asarray(x)

    def solve(self, b):
        return np.asarray(b) / self.root

    def solve_t(self, b):
        return np.asarray(b) / self.root

    def solve_full(self, b):
        return np.asarray(b) / self.variance


def sparse_cholesky(
    S,
    jitters: tuple[float, ...] = JITTER_LADDER,
    ordering: str = "fill-reducing",
) -> SparseChol:
    """Factorize a sparse symmetric matrix, by default with fill-reducing ordering.

    The factored matrix is ``S + jitter * I`` for the first jitter in
    ``jitters`` that yields a positive-definite factorization; raises
    :class:`FactorizationError` once the ladder is exhausted.
    """
    S = sp.csc_matrix(S)
    if S.shape[0] != S.shape[1]:
        raise DimensionError(f"matrix must be square, got {S.shape}")
    n = S.shape[0]
    err: Exception | None = None
    for jitter in jitters:
        A = (S + jitter * sp.identity(n, format="csc")).tocsc()
        try:
            lu = splu(
                A,
                permc_spec="NATURAL" if ordering == "natural" else "MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:  # singular factor
            err = exc
            continue
        if not np.array_equal(lu.perm_r, lu.perm_c):
            err = FactorizationError("pivoting kicked in; matrix is not positive definite")
            continue
        u_diag = lu.U.diagonal()
        if np.any(u_diag <= 0):
            err = FactorizationError("non-positive pivot; matrix is not positive definite")
            continue
        L = (lu.L @ sp.diags(np.sqrt(u_diag))).tocsr()
        return SparseChol(L=L, perm=np.asarray(lu.perm_c), jitter_used=jitter)
    raise FactorizationError(
        f"sparse Cholesky failed after jitter escalation {jitters}: {err}"
    )


def dense_cholesky(K: np.ndarray, jitters: tuple[float, ...] = (0.0, 1e-10, 1e-8, 1e-6)) -> DenseChol:
    """Cholesky of a dense SPD matrix with a small jitter ladder as safety net."""
    K = np.asarray(K, dtype=np.float64)
    scale = max(float(np.mean(np.diag(K))), 1.0) if K.size else 1.0
    for jitter in jitters:
        target = K + (jitter * scale) * np.eye(K.shape[0]) if jitter else K
        try:
            return DenseChol(L=np.linalg.cholesky(target), jitter_used=jitter * scale)
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError("dense Cholesky failed after jitter escalation")


def _as_shape(op) -> tuple[int, int]:
    return op.shape


def kron_mode_apply(t3d: np.ndarray, fns) -> np.ndarray:
    """Apply one matrix function per mode of a third-order array.

    ``fns`` is a sequence of three callables (or None to skip a mode);
    each receives the mode-k unfolding and must return a matrix with the
    same number of columns.
    """
    from .tensors import fold, unfold

    out = t3d
    for k, fn in enumerate(fns):
        if fn is None:
            continue
        unf = unfold(out, k + 1)
        res = np.asarray(fn(unf))
        dims = list(out.shape)
        dims[k] = res.shape[0]
        out = fold(res, k + 1, tuple(dims))
    return out


def kron_matvec(k1, k2, k3, y: np.ndarray) -> np.ndarray:
    """(K3 (x) K2 (x) K1) @ y without forming the Kronecker product.

    Each operand may be a dense array, a scipy sparse matrix, a
    :class:`ScaledIdentity`, or None for the identity.  Cost is
    O(n1*n2*n3*(n1+n2+n3)) via sequential mode products.
    """
    ops = (k1, k2, k3)
    dims = tuple(_as_shape(op)[1] if op is not None else -1 for op in ops)
    y = np.asarray(y, dtype=np.float64)
    known = [d for d in dims if d > 0]
    if len(known) < 3:
        rest = y.size // int(np.prod(known)) if known else y.size
        # at most one unknown dimension can be inferred
        if sum(1 for d in dims if d < 0) > 1:
            raise DimensionError("at most one operand may be None")
        dims = tuple(d if d > 0 else rest for d in dims)
    if int(np.prod(dims)) != y.size:
        raise DimensionError(f"operand dims {dims} incompatible with vector length {y.size}")
    t = y.reshape(dims, order="F")
    fns = [None if op is None else (lambda A, op=op: op @ A) for op in ops]
    return kron_mode_apply(t, fns).reshape(-1, order="F")


@dataclass
class PcgResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norms: np.ndarray  # preconditioned norms, monotone nonincreasing
    relative_residual: float


def pcg_solve(
    apply_a: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    precond_inv_sqrt: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 1000,
) -> PcgResult:
    """Preconditioned conjugate gradients with minimal-residual smoothing.

    ``precond_inv_sqrt`` is the diagonal of M^{-1/2} for a Jacobi-style
    preconditioner M.  Plain CG residual norms may oscillate, so the
    returned iterate is the residual-smoothed sequence, whose
    preconditioned residual norm is nonincreasing by construction; the
    final answer agrees with CG at convergence.

    Returns the best iterate with ``converged=False`` if ``max_iter`` is
    exhausted before the relative residual drops below ``tol``.
    """
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    if precond_inv_sqrt is None:
        minv = np.ones(n)
    else:
        minv = np.asarray(precond_inv_sqrt, dtype=np.float64) ** 2
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return PcgResult(np.zeros(n), True, 0, np.zeros(1), 0.0)

    x = np.zeros(n)
    r = b.copy()
    z = minv * r
    p = z.copy()
    rz = float(r @ z)

    # smoothed sequence (minimal residual smoothing in the M^{-1} norm)
    xs = x.copy()
    rs = r.copy()
    norms = [np.sqrt(rz)]
    rel = float(np.linalg.norm(rs)) / b_norm
    if rel <= tol:
        return PcgResult(xs, True, 0, np.array(norms), rel)

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        ap = apply_a(p)
        pap = float(p @ ap)
        if pap <= 0:
            break  # operator is not SPD as seen from this Krylov space
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        z = minv * r
        rz_new = float(r @ z)

        # smooth: minimize || (1-eta) rs + eta r ||_{M^{-1}} over eta
        d = r - rs
        dm = minv * d
        dd = float(d @ dm)
        if dd > 0:
            eta = -float(rs @ dm) / dd
            eta = min(1.0, max(0.0, eta))
        else:
            eta = 1.0
        xs = xs + eta * (x - xs)
        rs = rs + eta * d
        rs_mn2 = float(rs @ (minv * rs))
        norms.append(np.sqrt(max(rs_mn2, 0.0)))

        rel = float(np.linalg.norm(rs)) / b_norm
        if rel <= tol:
            converged = True
            break
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p

    return PcgResult(xs, converged, it, np.array(norms), rel)


@dataclass
class ImplicitH:
    """Selection-and-scale operator H (|obs| x n) applied implicitly.

    H u = u[rows] * scale, i.e. each observed row pairs an index into the
    length-n operand with a multiplier.  H^T H is diagonal.
    """

    rows: np.ndarray  # (n_obs,) int indices into the length-n operand
    scale: np.ndarray  # (n_obs,) multipliers
    n: int

    def mul(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u)[self.rows] * self.scale

    def mul_t(self, s: np.ndarray) -> np.ndarray:
        return np.bincount(self.rows, weights=np.asarray(s) * self.scale, minlength=self.n)

    def hth_diag(self) -> np.ndarray:
        return np.bincount(self.rows, weights=self.scale**2, minlength=self.n)

    @property
    def n_obs(self) -> int:
        return self.rows.size


def woodbury_inner_chol(K_chol: DenseChol, hth_diag: np.ndarray, tau: float) -> DenseChol:
    """Cholesky of the small matrix K^{-1} + tau * diag(hth_diag)."""
    n = K_chol.n
    k_inv = K_chol.solve_full(np.eye(n))
    inner = k_inv + tau * np.diag(hth_diag)
    inner = 0.5 * (inner + inner.T)
    return dense_cholesky(inner)


def woodbury_solve(h: ImplicitH, K_chol: DenseChol, tau: float, y: np.ndarray) -> np.ndarray:
    """(tau^{-1} I + H K H^T)^{-1} y via the small-matrix identity.

    Evaluates tau*y - tau^2 * H (K^{-1} + tau H^T H)^{-1} H^T y, so only an
    n_small x n_small system is ever factorized.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.size != h.n_obs:
        raise DimensionError(f"y has length {y.size}, expected {h.n_obs}")
    inner = woodbury_inner_chol(K_chol, h.hth_diag(), tau)
    hty = h.mul_t(y)
    return tau * y - tau**2 * h.mul(inner.solve_full(hty))


def woodbury_logdet(K_chol: DenseChol, hth_diag: np.ndarray, tau: float, n_obs: int) -> float:
    """log det(tau^{-1} I + H K H^T), including the -n_obs*log(tau) constant."""
    inner = woodbury_inner_chol(K_chol, hth_diag, tau)
    return inner.logdet() + K_chol.logdet() - n_obs * float(np.log(tau))


def woodbury_quadform(
    K_chol: DenseChol,
    hth_diag: np.ndarray,
    tau: float,
    hty: np.ndarray,
    yty: float,
) -> float:
    """y^T (tau^{-1} I + H K H^T)^{-1} y from the reduced statistics H^T y and y^T y."""
    inner = woodbury_inner_chol(K_chol, hth_diag, tau)
    return tau * yty - tau**2 * float(hty @ inner.solve_full(hty))
