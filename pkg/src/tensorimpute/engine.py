"""Gibbs-sweep orchestration: burn-in, retention, noise update, traces.

One sweep updates, in order: per CP column its two length-scales and the
three factor columns; the W-column precision; per local component its
two length-scales and variable covariance; the joint prior draw plus
shared conditional correction of all local components; the assembled
global and local tensors; and finally the noise precision.  Retained
reconstructions stream into :class:`~tensorimpute.posterior.PosteriorSamples`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .distributions import named_rng, sample_gamma
from .errors import ConfigError, SolverError
from .global_sampler import (
    GlobalModel,
    GlobalState,
    init_global_state,
    sample_factor,
    sample_lambda_w,
    update_column_lengthscales,
)
from .kernels import KernelSpec, TaperSpec
from .local_sampler import (
    LocalModel,
    LocalState,
    conditional_correct,
    init_local_state,
    sample_variable_covariance,
    update_component_lengthscales,
)
from .posterior import PosteriorSamples
from .tensors import SpatioTensor, cp_reconstruct, unvectorize, vectorize

__all__ = [
    "Hyperpriors",
    "McmcConfig",
    "SamplerState",
    "McmcResult",
    "sample_tau",
    "run_mcmc",
]

logger = logging.getLogger(__name__)

DEFAULT_MU_LENGTHSCALE = float(np.log(10.0))


@dataclass
class Hyperpriors:
    """Hyper-prior parameters: normal priors on log length-scales, Gamma on
    the noise precision, Wishart scale/dof for the W-column precision."""

    mu_phi: float = DEFAULT_MU_LENGTHSCALE
    tau_phi: float = 1.0
    mu_delta: float = DEFAULT_MU_LENGTHSCALE
    tau_delta: float = 1.0
    mu_theta: float = 0.0
    tau_theta: float = 1.0
    a0: float = 1e-6
    b0: float = 1e-6
    psi0: np.ndarray | None = None  # default identity
    nu0: float | None = None  # default P


@dataclass
class McmcConfig:
    """Run configuration; field names mirror the JSON schema in cli-io."""

    rank: int = 10
    n_local: int = 2
    burnin: int = 1000
    samples: int = 500
    kernel_u: KernelSpec = field(default_factory=KernelSpec)
    kernel_v: KernelSpec = field(default_factory=KernelSpec)
    local_base1: KernelSpec = field(default_factory=KernelSpec)
    local_base2: KernelSpec = field(default_factory=KernelSpec)
    taper1: TaperSpec = field(default_factory=TaperSpec)
    taper2: TaperSpec = field(default_factory=TaperSpec)
    k3_mode: str = "diagonal"
    hyperpriors: Hyperpriors = field(default_factory=Hyperpriors)
    seed: int = 0
    pcg_tol: float = 1e-8
    pcg_max_iter: int = 1000
    tau_imag: float = 1e-6
    interval_includes_noise: bool = True
    interval_level: float = 0.95
    exact_quantiles: bool | None = None
    coords_u: np.ndarray | None = None
    coords_v: np.ndarray | None = None
    # diagnostic freezes; production runs leave these True
    learn_global_lengthscales: bool = True
    learn_lambda_w: bool = True
    learn_local_hyper: bool = True
    learn_k3: bool = True
    learn_tau: bool = True

    def __post_init__(self) -> None:
        if self.rank < 0 or self.n_local < 0:
            raise ConfigError("rank and n_local must be nonnegative")
        if self.rank == 0 and self.n_local == 0:
            raise ConfigError("model is empty: rank and n_local cannot both be zero")
        if self.burnin < 0:
            raise ConfigError("burnin must be >= 0")
        if self.samples < 1:
            raise ConfigError("need at least one retained sweep")
        if self.k3_mode not in ("full", "diagonal"):
            raise ConfigError(f"k3_mode must be 'full' or 'diagonal', got {self.k3_mode!r}")

    @property
    def total_sweeps(self) -> int:
        return self.burnin + self.samples


@dataclass
class SamplerState:
    """Mutable chain state: global factors, local components, noise precision."""

    global_state: GlobalState
    local_state: LocalState
    tau: float


@dataclass
class McmcResult:
    posterior: PosteriorSamples
    state: SamplerState
    pcg_failures: int = 0


def sample_tau(
    residual_obs: np.ndarray, a0: float, b0: float, rng: np.random.Generator
) -> float:
    """Gamma draw of the noise precision given residuals restricted to the
    observed set: shape a0 + n/2, rate b0 + ||residual||^2 / 2."""
    residual_obs = np.asarray(residual_obs, dtype=np.float64).ravel()
    n = residual_obs.size
    return sample_gamma(a0 + 0.5 * n, b0 + 0.5 * float(residual_obs @ residual_obs), rng)


def _build_models(data: SpatioTensor, cfg: McmcConfig) -> tuple[GlobalModel, LocalModel]:
    M, T, P = data.dims
    hp = cfg.hyperpriors
    psi0 = np.eye(P) if hp.psi0 is None else np.asarray(hp.psi0, dtype=np.float64)
    nu0 = float(P) if hp.nu0 is None else float(hp.nu0)
    coords_u = np.arange(M, dtype=np.float64) if cfg.coords_u is None else np.asarray(cfg.coords_u)
    coords_v = np.arange(T, dtype=np.float64) if cfg.coords_v is None else np.asarray(cfg.coords_v)
    gmodel = GlobalModel(
        mask=data.mask,
        kernel_u=cfg.kernel_u,
        kernel_v=cfg.kernel_v,
        coords_u=coords_u,
        coords_v=coords_v,
        mu_phi=hp.mu_phi,
        tau_phi=hp.tau_phi,
        mu_delta=hp.mu_delta,
        tau_delta=hp.tau_delta,
        psi0=psi0,
        nu0=nu0,
    )
    lmodel = LocalModel(
        mask=data.mask,
        base1=cfg.local_base1,
        base2=cfg.local_base2,
        taper1=cfg.taper1,
        taper2=cfg.taper2,
        coords1=coords_u,
        coords2=coords_v,
        k3_mode=cfg.k3_mode,
        mu_theta=hp.mu_theta,
        tau_theta=hp.tau_theta,
        psi0=psi0,
        nu0=nu0,
        tau_imag=cfg.tau_imag,
    )
    return gmodel, lmodel


def init_state(data: SpatioTensor, cfg: McmcConfig, rng: np.random.Generator) -> SamplerState:
    gmodel, lmodel = _build_models(data, cfg)
    gstate = init_global_state(gmodel, cfg.rank, rng)
    lstate = init_local_state(lmodel, cfg.n_local, rng)
    return SamplerState(global_state=gstate, local_state=lstate, tau=1.0)


def run_mcmc(
    data: SpatioTensor,
    cfg: McmcConfig,
    initial: SamplerState | None = None,
    observer: Callable[[str, int], None] | None = None,
) -> McmcResult:
    """Run the full Gibbs chain and return retained summaries plus final state.

    ``observer`` (diagnostics only) receives every update event as
    ``(label, index)`` so tests can check the sweep order.  All
    randomness derives from ``cfg.seed`` through named substreams; the
    interval-noise draws use their own substream so toggling
    ``interval_includes_noise`` does not perturb the chain.
    """
    if data.n_observed == 0:
        raise ConfigError("cannot fit a tensor with no observed entries")
    gmodel, lmodel = _build_models(data, cfg)
    rng = named_rng(cfg.seed, "chain")
    noise_rng = named_rng(cfg.seed, "predictive")
    state = initial if initial is not None else init_state(data, cfg, rng)
    gstate, lstate = state.global_state, state.local_state
    D, Q = gstate.rank, lstate.n_components
    hp = cfg.hyperpriors

    maskf = data.mask.astype(np.float64)
    y_obs = data.filled(0.0)
    dims = data.dims
    posterior = PosteriorSamples(
        dims, cfg.samples, level=cfg.interval_level, exact=cfg.exact_quantiles
    )

    def emit(label: str, index: int = -1) -> None:
        if observer is not None:
            observer(label, index)

    max_pcg_failures = math.ceil(0.01 * cfg.total_sweeps)
    pcg_failures = 0

    x_tensor = cp_reconstruct(gstate.factors)
    r_vec = lstate.total()
    for sweep in range(1, cfg.total_sweeps + 1):
        r_masked = maskf * unvectorize(r_vec, dims)
        resid_all = y_obs - r_masked - maskf * x_tensor
        for d in range(D):
            rank1 = np.einsum(
                "m,t,p->mtp",
                gstate.factors.U[:, d],
                gstate.factors.V[:, d],
                gstate.factors.W[:, d],
            )
            resid_d = resid_all + maskf * rank1
            if cfg.learn_global_lengthscales:
                update_column_lengthscales(gmodel, gstate, d, resid_d, state.tau, rng)
            emit("phi", d)
            emit("delta", d)
            sample_factor(gmodel, gstate, "u", d, resid_d, state.tau, rng)
            emit("u", d)
            sample_factor(gmodel, gstate, "v", d, resid_d, state.tau, rng)
            emit("v", d)
            sample_factor(gmodel, gstate, "w", d, resid_d, state.tau, rng)
            emit("w", d)
            rank1 = np.einsum(
                "m,t,p->mtp",
                gstate.factors.U[:, d],
                gstate.factors.V[:, d],
                gstate.factors.W[:, d],
            )
            resid_all = resid_d - maskf * rank1
        if D > 0 and cfg.learn_lambda_w:
            gstate.lambda_w = sample_lambda_w(gstate.factors.W, gmodel.psi0, gmodel.nu0, rng)
        emit("lambda_w")

        x_tensor = cp_reconstruct(gstate.factors)
        y_minus_x_masked = y_obs - maskf * x_tensor
        pcg_iters = 0
        if Q > 0:
            for q in range(Q):
                if cfg.learn_local_hyper:
                    update_component_lengthscales(
                        lmodel, lstate, q, y_minus_x_masked, state.tau, rng
                    )
                emit("theta1", q)
                emit("theta2", q)
                if cfg.learn_k3:
                    sample_variable_covariance(
                        lmodel, lstate, q, y_minus_x_masked, state.tau, rng
                    )
                emit("k3", q)
            result = conditional_correct(
                lmodel,
                lstate,
                y_minus_x_masked,
                state.tau,
                rng,
                pcg_tol=cfg.pcg_tol,
                pcg_max_iter=cfg.pcg_max_iter,
            )
            pcg_iters = result.iterations
            for q in range(Q):
                emit("joint_draw", q)
                emit("correct", q)
            if not result.converged:
                pcg_failures += 1
                logger.warning(
                    json.dumps(
                        {
                            "event": "pcg_not_converged",
                            "sweep": sweep,
                            "relative_residual": result.relative_residual,
                        }
                    )
                )
                if pcg_failures > max_pcg_failures:
                    raise SolverError(
                        f"PCG failed on {pcg_failures} sweeps "
                        f"(> 1% of {cfg.total_sweeps}); aborting"
                    )
            r_vec = lstate.total()
        emit("assemble")

        resid_tau = y_obs - maskf * x_tensor - maskf * unvectorize(r_vec, dims)
        if cfg.learn_tau:
            state.tau = sample_tau(resid_tau[data.mask], hp.a0, hp.b0, rng)
        emit("tau")

        theta1 = np.exp(lstate.log_theta1) if Q else np.zeros(0)
        theta2 = np.exp(lstate.log_theta2) if Q else np.zeros(0)
        posterior.add_trace(
            iter=sweep,
            tau=state.tau,
            phi=np.exp(gstate.log_phi.copy()),
            delta=np.exp(gstate.log_delta.copy()),
            theta1=theta1,
            theta2=theta2,
            sigma2=(
                np.exp(lstate.log_sigma2.copy())
                if lstate.log_sigma2 is not None
                else np.zeros(0)
            ),
            pcg_iters=pcg_iters,
        )
        logger.info(
            json.dumps(
                {
                    "sweep": sweep,
                    "tau": state.tau,
                    "theta1": theta1.tolist(),
                    "theta2": theta2.tolist(),
                    "pcg_iters": pcg_iters,
                }
            )
        )

        if sweep > cfg.burnin:
            y_tilde = vectorize(x_tensor) + r_vec
            if cfg.interval_includes_noise:
                interval_sample = y_tilde + noise_rng.standard_normal(
                    y_tilde.size
                ) / math.sqrt(state.tau)
            else:
                interval_sample = y_tilde
            posterior.add_reconstruction(y_tilde, interval_sample)
            emit("collect")

    return McmcResult(posterior=posterior, state=state, pcg_failures=pcg_failures)
