"""Gibbs updates for the CP factors and their hyperparameters.

Residual tensors passed into this module are *masked*: unobserved
entries hold zero, so unfolding/matmul expressions automatically restrict
sums to the observed index set without materializing selection matrices.

The Gaussian conditional of a factor column has precision
``tau * diag(g) + prior_precision`` where ``g`` collects, per row of the
relevant unfolding, the squared coefficients of the other two factors at
the observed positions; the linear term is ``tau`` times the masked
residual unfolding applied to those coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import sample_mvn_precision, sample_wishart, slice_sample_1d
from .errors import ParameterError
from .kernels import KernelSpec, build_factor_covariance
from .linalg import DenseChol, dense_cholesky, woodbury_logdet, woodbury_quadform
from .tensors import CPFactors, unfold

__all__ = [
    "GlobalModel",
    "GlobalState",
    "init_global_state",
    "factor_posterior_params",
    "factor_coefficients",
    "sample_factor",
    "sample_lambda_w",
    "lambda_w_posterior_params",
    "lengthscale_logmarginal",
    "update_column_lengthscales",
    "update_global_lengthscales",
]

_FACTOR_MODES = ("u", "v", "w")


@dataclass
class GlobalModel:
    """Static description of the global component: mask views, kernels, priors."""

    mask: np.ndarray  # (M, T, P) bool
    kernel_u: KernelSpec
    kernel_v: KernelSpec
    coords_u: np.ndarray
    coords_v: np.ndarray
    mu_phi: float
    tau_phi: float
    mu_delta: float
    tau_delta: float
    psi0: np.ndarray  # (P, P) Wishart scale for Lambda_w
    nu0: float
    mask_unf: tuple[np.ndarray, np.ndarray, np.ndarray] = field(init=False)

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        self.mask_unf = tuple(unfold(self.mask, k).astype(np.float64) for k in (1, 2, 3))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.mask.shape  # type: ignore[return-value]

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())


@dataclass
class GlobalState:
    """Factors, log length-scales, W-precision and per-column covariance caches."""

    factors: CPFactors
    log_phi: np.ndarray  # (D,)
    log_delta: np.ndarray  # (D,)
    lambda_w: np.ndarray  # (P, P)
    chol_u: list[DenseChol]
    chol_v: list[DenseChol]
    kinv_u: list[np.ndarray]
    kinv_v: list[np.ndarray]

    @property
    def rank(self) -> int:
        return self.factors.rank


def _column_cov(model: GlobalModel, mode: str, log_ell: float) -> DenseChol:
    if mode == "u":
        spec, coords = model.kernel_u, model.coords_u
    else:
        spec, coords = model.kernel_v, model.coords_v
    if spec.has_lengthscale:
        spec = spec.with_lengthscale(float(np.exp(log_ell)))
    K = build_factor_covariance(coords, spec)
    return dense_cholesky(K, jitters=(0.0,))


def init_global_state(model: GlobalModel, rank: int, rng: np.random.Generator) -> GlobalState:
    """Factors from standard normal draws, unit length-scales, identity W-precision."""
    M, T, P = model.dims
    factors = CPFactors(
        U=rng.standard_normal((M, rank)),
        V=rng.standard_normal((T, rank)),
        W=rng.standard_normal((P, rank)),
    )
    log_phi = np.zeros(rank)
    log_delta = np.zeros(rank)
    state = GlobalState(
        factors=factors,
        log_phi=log_phi,
        log_delta=log_delta,
        lambda_w=np.eye(P),
        chol_u=[],
        chol_v=[],
        kinv_u=[],
        kinv_v=[],
    )
    for d in range(rank):
        state.chol_u.append(_column_cov(model, "u", log_phi[d]))
        state.chol_v.append(_column_cov(model, "v", log_delta[d]))
        state.kinv_u.append(state.chol_u[d].solve_full(np.eye(M)))
        state.kinv_v.append(state.chol_v[d].solve_full(np.eye(T)))
    return state


def refresh_column_cov(model: GlobalModel, state: GlobalState, mode: str, d: int) -> None:
    """Rebuild the cached Cholesky/inverse after a length-scale change."""
    if mode == "u":
        state.chol_u[d] = _column_cov(model, "u", state.log_phi[d])
        state.kinv_u[d] = state.chol_u[d].solve_full(np.eye(model.dims[0]))
    else:
        state.chol_v[d] = _column_cov(model, "v", state.log_delta[d])
        state.kinv_v[d] = state.chol_v[d].solve_full(np.eye(model.dims[1]))


def factor_coefficients(factors: CPFactors, mode: str, d: int) -> np.ndarray:
    """Kronecker coefficient vector pairing the two factors not being updated."""
    u = factors.U[:, d]
    v = factors.V[:, d]
    w = factors.W[:, d]
    if mode == "u":
        return np.kron(w, v)
    if mode == "v":
        return np.kron(w, u)
    if mode == "w":
        return np.kron(v, u)
    raise ParameterError(f"mode must be one of {_FACTOR_MODES}, got {mode!r}")


def factor_posterior_params(
    resid_masked_unf: np.ndarray,
    mask_unf: np.ndarray,
    coeff: np.ndarray,
    tau: float,
    prior_precision: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Linear term and precision of a factor column's Gaussian conditional.

    ``resid_masked_unf`` is the relevant mode unfolding of the masked
    residual (zeros off the observed set) and ``mask_unf`` the matching
    mask unfolding as floats.
    """
    g = mask_unf @ (coeff**2)
    eta = tau * (resid_masked_unf @ coeff)
    lam = tau * np.diag(g) + prior_precision
    return eta, lam


def _prior_precision(state: GlobalState, mode: str, d: int) -> np.ndarray:
    if mode == "u":
        return state.kinv_u[d]
    if mode == "v":
        return state.kinv_v[d]
    return state.lambda_w


def sample_factor(
    model: GlobalModel,
    state: GlobalState,
    mode: str,
    d: int,
    resid_masked: np.ndarray,
    tau: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw one factor column from its conditional and write it into the state.

    ``resid_masked`` is the masked residual tensor with every component
    except column ``d`` (and the local part) subtracted off.
    """
    k = _FACTOR_MODES.index(mode) + 1
    coeff = factor_coefficients(state.factors, mode, d)
    eta, lam = factor_posterior_params(
        unfold(resid_masked, k), model.mask_unf[k - 1], coeff, tau, _prior_precision(state, mode, d)
    )
    col = sample_mvn_precision(eta, lam, rng)
    if mode == "u":
        state.factors.U[:, d] = col
    elif mode == "v":
        state.factors.V[:, d] = col
    else:
        state.factors.W[:, d] = col
    return col


def lambda_w_posterior_params(
    W: np.ndarray, psi0: np.ndarray, nu0: float
) -> tuple[np.ndarray, float]:
    """Wishart posterior (scale, dof) for the W-column precision."""
    P, D = W.shape
    psi0_inv = dense_cholesky(psi0).solve_full(np.eye(P))
    psi_star_inv = W @ W.T + psi0_inv
    psi_star = np.linalg.inv(0.5 * (psi_star_inv + psi_star_inv.T))
    return 0.5 * (psi_star + psi_star.T), float(nu0) + D


def sample_lambda_w(
    W: np.ndarray, psi0: np.ndarray, nu0: float, rng: np.random.Generator
) -> np.ndarray:
    psi_star, nu_star = lambda_w_posterior_params(W, psi0, nu0)
    return sample_wishart(psi_star, nu_star, rng)


def _normal_logpdf(x: float, mu: float, precision: float) -> float:
    return 0.5 * (math.log(precision) - math.log(2.0 * math.pi)) - 0.5 * precision * (x - mu) ** 2


def lengthscale_logmarginal(
    model: GlobalModel,
    state: GlobalState,
    mode: str,
    d: int,
    lengthscale: float,
    resid_masked: np.ndarray,
    tau: float,
) -> float:
    """Log marginal posterior density of a factor length-scale proposal.

    Integrates the factor column out of the Gaussian likelihood: the
    observed residual has covariance H K H^T + tau^{-1} I, handled through
    the small-matrix Woodbury identities so the |observed| x |observed|
    matrix never exists.  Adds the normal hyper-prior on the log
    length-scale.  Returns -inf if the proposal covariance cannot be
    factorized.
    """
    if lengthscale <= 0:
        raise ParameterError(f"lengthscale must be > 0, got {lengthscale}")
    if mode == "u":
        mu, prec = model.mu_phi, model.tau_phi
        k = 1
    else:
        mu, prec = model.mu_delta, model.tau_delta
        k = 2
    log_ell = float(np.log(lengthscale))
    prior = _normal_logpdf(log_ell, mu, prec)

    n_obs = model.n_observed
    if n_obs == 0:
        return prior
    try:
        chol = _column_cov(model, mode, log_ell)
    except Exception:
        return -np.inf
    coeff = factor_coefficients(state.factors, mode, d)
    mask_unf = model.mask_unf[k - 1]
    resid_unf = unfold(resid_masked, k)
    g = mask_unf @ (coeff**2)
    hty = resid_unf @ coeff
    yty = float(np.sum(resid_unf**2))
    quad = woodbury_quadform(chol, g, tau, hty, yty)
    logdet = woodbury_logdet(chol, g, tau, n_obs)
    loglik = -0.5 * quad - 0.5 * logdet - 0.5 * n_obs * math.log(2.0 * math.pi)
    return loglik + prior


def update_column_lengthscales(
    model: GlobalModel,
    state: GlobalState,
    d: int,
    resid_masked: np.ndarray,
    tau: float,
    rng: np.random.Generator,
) -> None:
    """Slice-sample phi_d then delta_d in log-space; refresh caches on change."""
    if model.kernel_u.has_lengthscale:
        def log_density_u(x: float) -> float:
            return lengthscale_logmarginal(model, state, "u", d, float(np.exp(x)), resid_masked, tau)

        new_log, accepted = slice_sample_1d(log_density_u, float(state.log_phi[d]), rng)
        if accepted and new_log != state.log_phi[d]:
            state.log_phi[d] = new_log
            refresh_column_cov(model, state, "u", d)
    if model.kernel_v.has_lengthscale:
        def log_density_v(x: float) -> float:
            return lengthscale_logmarginal(model, state, "v", d, float(np.exp(x)), resid_masked, tau)

        new_log, accepted = slice_sample_1d(log_density_v, float(state.log_delta[d]), rng)
        if accepted and new_log != state.log_delta[d]:
            state.log_delta[d] = new_log
            refresh_column_cov(model, state, "v", d)


def update_global_lengthscales(
    model: GlobalModel,
    state: GlobalState,
    y_minus_r_masked: np.ndarray,
    tau: float,
    rng: np.random.Generator,
) -> None:
    """Batch variant: update phi_d, delta_d for every column in order."""
    from .tensors import cp_reconstruct

    maskf = model.mask.astype(np.float64)
    resid_all = y_minus_r_masked - maskf * cp_reconstruct(state.factors)
    for d in range(state.rank):
        rank1 = np.einsum(
            "m,t,p->mtp", state.factors.U[:, d], state.factors.V[:, d], state.factors.W[:, d]
        )
        resid_d = resid_all + maskf * rank1
        update_column_lengthscales(model, state, d, resid_d, tau, rng)
