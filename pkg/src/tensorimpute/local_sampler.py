"""Sampling of the short-range GP components.

Each of the Q components is a zero-mean GP over the full grid whose
covariance is a Kronecker product of two sparse tapered matrices and a
variable covariance.  Draws follow the joint-prior-then-correct scheme:
sample from the prior with cheap Kronecker square roots, then apply one
shared conditional correction obtained from a PCG solve on the full grid
(imaginary observations with near-zero precision fill the unobserved
positions so the system keeps its Kronecker-plus-diagonal structure).

Kernel hyperparameters move jointly with the component through a
whitened reparameterization: the white noise that generated the current
component is held fixed while the covariance square root changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .distributions import sample_inverse_wishart, slice_sample_1d
from .errors import ConfigError, ParameterError
from .kernels import KernelSpec, TaperSpec, build_tapered_covariance
from .linalg import (
    DenseChol,
    PcgResult,
    ScaledIdentity,
    ScaledIdentityChol,
    SparseChol,
    dense_cholesky,
    kron_matvec,
    kron_mode_apply,
    pcg_solve,
    sparse_cholesky,
)
from .tensors import unvectorize, vectorize

__all__ = [
    "LocalModel",
    "LocalState",
    "ImaginarySystem",
    "init_local_state",
    "draw_prior_component",
    "conditional_correct",
    "whiten_component",
    "rebuild_component",
    "update_component_lengthscales",
    "update_local_lengthscales",
    "variable_covariance_posterior",
    "sample_variable_covariance",
    "FULL_K3_MAX_P",
]

FULL_K3_MAX_P = 16


@dataclass
class LocalModel:
    """Static description of the local component: mask, kernels, priors."""

    mask: np.ndarray  # (M, T, P) bool
    base1: KernelSpec
    base2: KernelSpec
    taper1: TaperSpec
    taper2: TaperSpec
    coords1: np.ndarray
    coords2: np.ndarray
    k3_mode: str = "diagonal"
    mu_theta: float = 0.0
    tau_theta: float = 1.0
    psi0: np.ndarray | None = None  # (P, P); identity when omitted
    nu0: float | None = None  # defaults to P
    tau_imag: float = 1e-6
    mask_vec: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        P = self.mask.shape[2]
        if self.k3_mode not in ("full", "diagonal"):
            raise ConfigError(f"k3_mode must be 'full' or 'diagonal', got {self.k3_mode!r}")
        if self.k3_mode == "full" and P > FULL_K3_MAX_P:
            raise ConfigError(
                f"full variable covariance is gated to P <= {FULL_K3_MAX_P}, got P={P}"
            )
        if self.psi0 is None:
            self.psi0 = np.eye(P)
        if self.nu0 is None:
            self.nu0 = float(P)
        self.mask_vec = vectorize(self.mask)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.mask.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return int(np.prod(self.mask.shape))


@dataclass
class LocalState:
    """Q component vectors, their hyperparameters and covariance caches."""

    r: np.ndarray  # (Q, M*T*P), vectorized components
    log_theta1: np.ndarray  # (Q,)
    log_theta2: np.ndarray  # (Q,)
    k3: list[np.ndarray] | None  # full mode: (P, P) per component
    log_sigma2: np.ndarray | None  # diagonal mode: log variances
    k1: list[sp.csr_matrix]
    k2: list[sp.csr_matrix]
    chol1: list[SparseChol]
    chol2: list[SparseChol]
    chol3: list  # DenseChol or ScaledIdentityChol per component

    @property
    def n_components(self) -> int:
        return self.r.shape[0]

    def total(self) -> np.ndarray:
        """vec of the summed local tensor."""
        if self.n_components == 0:
            return np.zeros(self.r.shape[1])
        return self.r.sum(axis=0)

    def k3_operator(self, q: int):
        """Variable covariance as a Kronecker operand."""
        if self.k3 is not None:
            return self.k3[q]
        P = self.chol3[q].n
        return ScaledIdentity(P, float(np.exp(self.log_sigma2[q])))


@dataclass
class ImaginarySystem:
    """Full-grid right-hand side and noise diagonal for the shared correction solve.

    Imaginary observations occupy the unobserved positions with value 0
    and precision ``tau_imag`` -> 0, so they leave the inference
    unchanged while restoring the grid structure.
    """

    y_prime: np.ndarray  # (MTP,) zero off the observed set
    e_prime_diag: np.ndarray  # (MTP,) 1/tau on observed, 1/tau_imag elsewhere
    tau_imag: float

    def __post_init__(self) -> None:
        if np.any(self.e_prime_diag <= 0):
            raise ParameterError("noise diagonal must be strictly positive")


def _build_k1(model: LocalModel, log_theta: float) -> sp.csr_matrix:
    spec = model.base1.with_lengthscale(float(np.exp(log_theta)))
    return build_tapered_covariance(model.coords1, spec, model.taper1)


def _build_k2(model: LocalModel, log_theta: float) -> sp.csr_matrix:
    spec = model.base2.with_lengthscale(float(np.exp(log_theta)))
    return build_tapered_covariance(model.coords2, spec, model.taper2)


def _chol3_for(model: LocalModel, k3: np.ndarray | None, log_sigma2: float | None):
    P = model.dims[2]
    if model.k3_mode == "full":
        return dense_cholesky(np.asarray(k3))
    return ScaledIdentityChol(P, float(np.exp(log_sigma2)))


def init_local_state(model: LocalModel, n_components: int, rng: np.random.Generator) -> LocalState:
    """Standard-normal component vectors, unit length-scales and variances."""
    Q = n_components
    n = model.size
    state = LocalState(
        r=rng.standard_normal((Q, n)) if Q else np.zeros((0, n)),
        log_theta1=np.zeros(Q),
        log_theta2=np.zeros(Q),
        k3=[np.eye(model.dims[2]) for _ in range(Q)] if model.k3_mode == "full" else None,
        log_sigma2=np.zeros(Q) if model.k3_mode == "diagonal" else None,
        k1=[],
        k2=[],
        chol1=[],
        chol2=[],
        chol3=[],
    )
    for q in range(Q):
        state.k1.append(_build_k1(model, state.log_theta1[q]))
        state.k2.append(_build_k2(model, state.log_theta2[q]))
        state.chol1.append(sparse_cholesky(state.k1[q]))
        state.chol2.append(sparse_cholesky(state.k2[q]))
        state.chol3.append(
            _chol3_for(
                model,
                None if state.k3 is None else state.k3[q],
                None if state.log_sigma2 is None else state.log_sigma2[q],
            )
        )
    return state


def draw_prior_component(
    model: LocalModel, state: LocalState, q: int, rng: np.random.Generator
) -> np.ndarray:
    """One draw from the component's zero-mean prior via Kronecker square roots."""
    z = rng.standard_normal(model.size)
    return kron_matvec(
        state.chol1[q].matrix, state.chol2[q].matrix, state.chol3[q].matrix, z
    )


def _apply_kr(state: LocalState, q: int, v: np.ndarray) -> np.ndarray:
    return kron_matvec(state.k1[q], state.k2[q], state.k3_operator(q), v)


def conditional_correct(
    model: LocalModel,
    state: LocalState,
    y_minus_x_masked: np.ndarray,
    tau: float,
    rng: np.random.Generator,
    pcg_tol: float = 1e-8,
    pcg_max_iter: int = 1000,
) -> PcgResult:
    """Draw all components from their joint conditional given the residual.

    Samples prior components plus a noisy pseudo-observation of their sum,
    solves one shared full-grid system (sum of Kronecker covariances plus
    the imaginary-observation noise diagonal) with Jacobi-preconditioned
    CG, and subtracts the correction from each prior draw.  On
    non-convergence the previous components are kept and the caller
    decides whether the failure budget is exhausted.
    """
    Q = state.n_components
    if Q == 0:
        return PcgResult(np.zeros(model.size), True, 0, np.zeros(1), 0.0)
    r_tilde = np.array([draw_prior_component(model, state, q, rng) for q in range(Q)])
    z = rng.standard_normal(model.size) / math.sqrt(tau)
    y_tilde = r_tilde.sum(axis=0) + z

    y_obs = vectorize(np.asarray(y_minus_x_masked, dtype=np.float64))
    system = ImaginarySystem(
        y_prime=np.where(model.mask_vec, y_tilde - y_obs, 0.0),
        e_prime_diag=np.where(model.mask_vec, 1.0 / tau, 1.0 / model.tau_imag),
        tau_imag=model.tau_imag,
    )

    def apply_a(v: np.ndarray) -> np.ndarray:
        out = system.e_prime_diag * v
        for q in range(Q):
            out = out + _apply_kr(state, q, v)
        return out

    result = pcg_solve(
        apply_a,
        system.y_prime,
        precond_inv_sqrt=1.0 / np.sqrt(system.e_prime_diag),
        tol=pcg_tol,
        max_iter=pcg_max_iter,
    )
    if result.converged:
        for q in range(Q):
            state.r[q] = r_tilde[q] - _apply_kr(state, q, result.x)
    return result


def whiten_component(model: LocalModel, state: LocalState, q: int) -> np.ndarray:
    """Auxiliary white field G with r_q = (W3 (x) W2 (x) W1) vec(G)."""
    t3d = unvectorize(state.r[q], model.dims)
    g = kron_mode_apply(
        t3d,
        (state.chol1[q].solve, state.chol2[q].solve, state.chol3[q].solve),
    )
    return vectorize(g)


def rebuild_component(model: LocalModel, g: np.ndarray, chol1, chol2, chol3) -> np.ndarray:
    """Materialize a component from its white field under given square roots."""
    t3d = unvectorize(g, model.dims)
    out = kron_mode_apply(
        t3d,
        (
            lambda A: chol1.matrix @ A,
            lambda A: chol2.matrix @ A,
            lambda A: chol3.matrix @ A,
        ),
    )
    return vectorize(out)


def _masked_gaussian_loglik(
    model: LocalModel, resid_obs_masked_vec: np.ndarray, r_vec: np.ndarray, tau: float
) -> float:
    diff = np.where(model.mask_vec, resid_obs_masked_vec - r_vec, 0.0)
    n_obs = int(model.mask_vec.sum())
    return -0.5 * tau * float(diff @ diff) + 0.5 * n_obs * (
        math.log(tau) - math.log(2.0 * math.pi)
    )


def _normal_logpdf(x: float, mu: float, precision: float) -> float:
    return 0.5 * (math.log(precision) - math.log(2.0 * math.pi)) - 0.5 * precision * (x - mu) ** 2


def _component_residual(state: LocalState, y_minus_x_vec: np.ndarray, q: int) -> np.ndarray:
    """Residual seen by component q: everything minus the other components."""
    return y_minus_x_vec - (state.total() - state.r[q])


def update_component_lengthscales(
    model: LocalModel,
    state: LocalState,
    q: int,
    y_minus_x_masked: np.ndarray,
    tau: float,
    rng: np.random.Generator,
) -> None:
    """Whitened slice updates of both length-scales of component q.

    The white field is held fixed while a proposed length-scale swaps the
    covariance square root, so the component moves together with its
    hyperparameter; acceptance tests the masked Gaussian likelihood of
    the component residual times the log-normal hyper-prior.
    """
    y_vec = vectorize(np.asarray(y_minus_x_masked, dtype=np.float64))
    for which in (1, 2):
        log_cur = state.log_theta1[q] if which == 1 else state.log_theta2[q]
        g = whiten_component(model, state, q)
        resid = _component_residual(state, y_vec, q)
        cache: dict[float, tuple] = {}

        def log_density(x: float) -> float:
            try:
                if which == 1:
                    chol_new = sparse_cholesky(_build_k1(model, x))
                    r_new = rebuild_component(model, g, chol_new, state.chol2[q], state.chol3[q])
                else:
                    chol_new = sparse_cholesky(_build_k2(model, x))
                    r_new = rebuild_component(model, g, state.chol1[q], chol_new, state.chol3[q])
            except Exception:
                return -np.inf
            cache[x] = (chol_new, r_new)
            return _masked_gaussian_loglik(model, resid, r_new, tau) + _normal_logpdf(
                x, model.mu_theta, model.tau_theta
            )

        new_log, accepted = slice_sample_1d(log_density, float(log_cur), rng)
        if accepted and new_log in cache:
            chol_new, r_new = cache[new_log]
            state.r[q] = r_new
            if which == 1:
                state.log_theta1[q] = new_log
                state.k1[q] = _build_k1(model, new_log)
                state.chol1[q] = chol_new
            else:
                state.log_theta2[q] = new_log
                state.k2[q] = _build_k2(model, new_log)
                state.chol2[q] = chol_new


def update_local_lengthscales(
    model: LocalModel,
    state: LocalState,
    y_minus_x_masked: np.ndarray,
    tau: float,
    rng: np.random.Generator,
) -> None:
    for q in range(state.n_components):
        update_component_lengthscales(model, state, q, y_minus_x_masked, tau, rng)


def _observed_mt_indices(model: LocalModel) -> np.ndarray:
    """Flat (m, t) indices observed for at least one variable, mode-3 column order."""
    any_p = model.mask.any(axis=2)  # (M, T)
    return np.flatnonzero(any_p.reshape(-1, order="F"))


def variable_covariance_posterior(
    model: LocalModel, state: LocalState, q: int
) -> tuple[np.ndarray, float]:
    """Inverse-Wishart posterior (scale, dof) of the full variable covariance.

    Conditions on the component entries at (m, t) positions observed for
    at least one variable; the inner solve goes through a sparse Cholesky
    of the restricted Kronecker covariance of the first two modes.
    """
    M, T, P = model.dims
    idx = _observed_mt_indices(model)
    n_omega = idx.size
    psi0_inv = dense_cholesky(model.psi0).solve_full(np.eye(P))
    if n_omega == 0:
        return 0.5 * (psi0_inv + psi0_inv.T), float(model.nu0)
    r3t = state.r[q].reshape((M * T, P), order="F")[idx]  # (n_omega, P)
    kk = sp.kron(state.k2[q], state.k1[q], format="csr")
    k_sel = kk[idx][:, idx].tocsc()
    # principal submatrix of a PD Kronecker product: usually factorizable
    # without jitter, which keeps the conjugate update exact
    chol = sparse_cholesky(k_sel, jitters=(0.0, 1e-6, 1e-4))
    half = chol.solve(r3t)
    scatter = half.T @ half
    psi_star = scatter + psi0_inv
    return 0.5 * (psi_star + psi_star.T), float(model.nu0) + n_omega


def sample_variable_covariance(
    model: LocalModel,
    state: LocalState,
    q: int,
    y_minus_x_masked: np.ndarray,
    tau: float,
    rng: np.random.Generator,
) -> None:
    """Update the variable covariance of component q.

    Full mode draws from the conjugate inverse-Wishart conditional.
    Diagonal mode slice-samples the log variance with the same whitened
    conditional likelihood as the length-scale updates; scaling the
    variance rescales the component, so no refactorization is needed.
    """
    if model.k3_mode == "full":
        psi_star, nu_star = variable_covariance_posterior(model, state, q)
        k3_new = sample_inverse_wishart(psi_star, nu_star, rng)
        state.k3[q] = k3_new
        state.chol3[q] = dense_cholesky(k3_new)
        return

    y_vec = vectorize(np.asarray(y_minus_x_masked, dtype=np.float64))
    resid = _component_residual(state, y_vec, q)
    log_cur = float(state.log_sigma2[q])
    r_cur = state.r[q]

    def log_density(x: float) -> float:
        r_new = math.exp(0.5 * (x - log_cur)) * r_cur
        return _masked_gaussian_loglik(model, resid, r_new, tau) + _normal_logpdf(
            x, model.mu_theta, model.tau_theta
        )

    new_log, accepted = slice_sample_1d(log_density, log_cur, rng)
    if accepted:
        state.r[q] = math.exp(0.5 * (new_log - log_cur)) * r_cur
        state.log_sigma2[q] = new_log
        state.chol3[q] = ScaledIdentityChol(model.dims[2], float(np.exp(new_log)))
