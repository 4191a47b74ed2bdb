import itertools
import time

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from conftest import batch_means_se, dense_h
from tensorimpute.distributions import named_rng
from tensorimpute.global_sampler import (
    GlobalModel,
    factor_coefficients,
    factor_posterior_params,
    init_global_state,
    lambda_w_posterior_params,
    lengthscale_logmarginal,
    sample_factor,
    sample_lambda_w,
    update_column_lengthscales,
)
from tensorimpute.kernels import KernelSpec, build_factor_covariance
from tensorimpute.tensors import unfold


def make_model(mask, kernel_u=None, kernel_v=None, tau_phi=1.0, tau_delta=1.0):
    M, T, P = mask.shape
    return GlobalModel(
        mask=mask,
        kernel_u=kernel_u or KernelSpec(),
        kernel_v=kernel_v or KernelSpec(),
        coords_u=np.arange(M, dtype=float),
        coords_v=np.arange(T, dtype=float),
        mu_phi=float(np.log(10.0)),
        tau_phi=tau_phi,
        mu_delta=float(np.log(10.0)),
        tau_delta=tau_delta,
        psi0=np.eye(P),
        nu0=float(P),
    )


def dense_params(model, state, mode, d, resid_masked, tau):
    """Oracle (eta, Lambda) with explicit selection matrices."""
    mask = model.mask
    k = {"u": 1, "v": 2, "w": 3}[mode]
    nk = mask.shape[k - 1]
    coeff = factor_coefficients(state.factors, mode, d)
    H = dense_h(mask, coeff, k, nk)
    mvec = unfold(mask, k).reshape(-1, order="F")
    yk = unfold(resid_masked, k).reshape(-1, order="F")[mvec]
    prior = {"u": state.kinv_u, "v": state.kinv_v}.get(mode)
    prior_prec = prior[d] if prior is not None else state.lambda_w
    lam = tau * H.T @ H + prior_prec
    eta = tau * H.T @ yk
    return eta, lam


def fast_params(model, state, mode, d, resid_masked, tau):
    k = {"u": 1, "v": 2, "w": 3}[mode]
    coeff = factor_coefficients(state.factors, mode, d)
    prior = {"u": state.kinv_u, "v": state.kinv_v}.get(mode)
    prior_prec = prior[d] if prior is not None else state.lambda_w
    return factor_posterior_params(
        unfold(resid_masked, k), model.mask_unf[k - 1], coeff, tau, prior_prec
    )


def test_factor_params_exhaustive_masks_2x2x2():
    rng = named_rng(0, "exhaustive")
    y = rng.standard_normal((2, 2, 2))
    tau = 1.7
    for bits in itertools.product([False, True], repeat=8):
        mask = np.array(bits).reshape(2, 2, 2)
        model = make_model(mask)
        state = init_global_state(model, 1, rng)
        resid = np.where(mask, y, 0.0)
        for mode in ("u", "v", "w"):
            eta_f, lam_f = fast_params(model, state, mode, 0, resid, tau)
            eta_d, lam_d = dense_params(model, state, mode, 0, resid, tau)
            np.testing.assert_allclose(eta_f, eta_d, atol=1e-10)
            np.testing.assert_allclose(lam_f, lam_d, atol=1e-10)


def test_factor_params_random_masks_3x2x2():
    rng = named_rng(1, "random-masks")
    y = rng.standard_normal((3, 2, 2))
    for trial in range(50):
        mask = rng.random((3, 2, 2)) < rng.uniform(0.2, 0.9)
        model = make_model(mask)
        state = init_global_state(model, 2, rng)
        resid = np.where(mask, y, 0.0)
        tau = float(rng.uniform(0.5, 4.0))
        d = int(rng.integers(0, 2))
        for mode in ("u", "v", "w"):
            eta_f, lam_f = fast_params(model, state, mode, d, resid, tau)
            eta_d, lam_d = dense_params(model, state, mode, d, resid, tau)
            np.testing.assert_allclose(eta_f, eta_d, atol=1e-10)
            np.testing.assert_allclose(lam_f, lam_d, atol=1e-10)


def test_factor_linear_term_equivalence(rng):
    # the masked-unfolding form of the linear term equals H^T applied to the
    # observed residual subvector
    mask = rng.random((3, 2, 2)) < 0.6
    y = rng.standard_normal((3, 2, 2))
    model = make_model(mask)
    state = init_global_state(model, 1, named_rng(2, "s"))
    resid = np.where(mask, y, 0.0)
    coeff = factor_coefficients(state.factors, "u", 0)
    H = dense_h(mask, coeff, 1, 3)
    mvec = unfold(mask, 1).reshape(-1, order="F")
    yobs = unfold(resid, 1).reshape(-1, order="F")[mvec]
    np.testing.assert_allclose(unfold(resid, 1) @ coeff, H.T @ yobs, atol=1e-12)


def test_empty_mask_draw_has_prior_covariance():
    mask = np.zeros((3, 2, 2), dtype=bool)
    model = make_model(mask)
    gen = named_rng(3, "prior")
    state = init_global_state(model, 1, gen)
    resid = np.zeros((3, 2, 2))
    draws = np.array(
        [sample_factor(model, state, "u", 0, resid, 2.0, gen) for _ in range(20_000)]
    )
    K = build_factor_covariance(model.coords_u, KernelSpec())
    cov = np.cov(draws.T)
    se = np.sqrt((np.outer(np.diag(K), np.diag(K)) + K**2) / draws.shape[0])
    assert np.all(np.abs(cov - K) < 4 * se)


def test_empty_mask_w_draw_has_lambda_inverse_covariance():
    mask = np.zeros((3, 2, 2), dtype=bool)
    model = make_model(mask)
    gen = named_rng(4, "priorw")
    state = init_global_state(model, 1, gen)
    state.lambda_w = np.array([[2.0, 0.5], [0.5, 1.0]])
    resid = np.zeros((3, 2, 2))
    draws = np.array(
        [sample_factor(model, state, "w", 0, resid, 2.0, gen) for _ in range(20_000)]
    )
    target = np.linalg.inv(state.lambda_w)
    cov = np.cov(draws.T)
    se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / draws.shape[0])
    assert np.all(np.abs(cov - target) < 4 * se)


def test_near_interpolation_limit():
    # tau -> inf with fully observed rank-1 data and v, w at truth pins u
    rng = named_rng(5, "interp")
    M, T, P = 6, 5, 2
    mask = np.ones((M, T, P), dtype=bool)
    model = make_model(mask)
    state = init_global_state(model, 1, rng)
    u0 = rng.standard_normal(M)
    state.factors.V[:, 0] = rng.standard_normal(T)
    state.factors.W[:, 0] = rng.standard_normal(P)
    data = np.einsum("m,t,p->mtp", u0, state.factors.V[:, 0], state.factors.W[:, 0])
    tau = 1e8
    coeff = factor_coefficients(state.factors, "u", 0)
    eta, lam = factor_posterior_params(
        unfold(data, 1), model.mask_unf[0], coeff, tau, state.kinv_u[0]
    )
    mean = np.linalg.solve(lam, eta)
    np.testing.assert_allclose(mean, u0, atol=1e-3)


def test_permutation_equivariance_of_posterior_params():
    # permuting the variable axis of data and mask permutes (eta, Lambda) of
    # the w update exactly (draws consume noise in fixed order, so the
    # deterministic parameters are the right place to assert equivariance)
    rng = named_rng(6, "perm")
    M, T, P = 3, 2, 4
    mask = rng.random((M, T, P)) < 0.7
    y = rng.standard_normal((M, T, P))
    perm = rng.permutation(P)
    model = make_model(mask)
    state = init_global_state(model, 1, named_rng(7, "s"))
    resid = np.where(mask, y, 0.0)
    eta, lam = fast_params(model, state, "w", 0, resid, 1.3)

    model_p = make_model(mask[:, :, perm])
    state_p = init_global_state(model_p, 1, named_rng(7, "s"))
    state_p.factors.U[:] = state.factors.U
    state_p.factors.V[:] = state.factors.V
    state_p.factors.W[:] = state.factors.W[perm]
    eta_p, lam_p = fast_params(model_p, state_p, "w", 0, resid[:, :, perm], 1.3)
    np.testing.assert_allclose(eta_p, eta[perm], atol=1e-12)
    np.testing.assert_allclose(lam_p, lam[np.ix_(perm, perm)], atol=1e-12)


def test_lambda_w_posterior_params():
    P, D = 3, 4
    rng = named_rng(8, "lw")
    W = np.zeros((P, D))
    psi_star, nu_star = lambda_w_posterior_params(W, np.eye(P), float(P))
    np.testing.assert_allclose(psi_star, np.eye(P), atol=1e-12)
    assert nu_star == P + D
    W = rng.standard_normal((P, D))
    psi_star, _ = lambda_w_posterior_params(W, np.eye(P), float(P))
    np.testing.assert_allclose(np.linalg.inv(psi_star), W @ W.T + np.eye(P), atol=1e-10)


@pytest.mark.slow
def test_lambda_w_posterior_moments():
    rng = named_rng(9, "lw-mc")
    W = rng.standard_normal((2, 3))
    psi_star, nu_star = lambda_w_posterior_params(W, np.eye(2), 2.0)
    draws = np.array([sample_lambda_w(W, np.eye(2), 2.0, rng) for _ in range(50_000)])
    target = nu_star * psi_star
    se = np.sqrt(nu_star * (psi_star**2 + np.outer(np.diag(psi_star), np.diag(psi_star))) / 50_000)
    assert np.all(np.abs(draws.mean(axis=0) - target) < 3.5 * se)


def test_lengthscale_marginal_matches_dense():
    rng = named_rng(10, "marg")
    M, T, P = 3, 2, 2
    y = rng.standard_normal((M, T, P))
    for trial in range(20):
        mask = rng.random((M, T, P)) < rng.uniform(0.3, 0.95)
        if not mask.any():
            continue
        model = make_model(mask)
        state = init_global_state(model, 1, rng)
        resid = np.where(mask, y, 0.0)
        tau = float(rng.uniform(0.5, 3.0))
        ell = float(rng.uniform(0.3, 8.0))
        mode = "u" if trial % 2 == 0 else "v"
        k, nk = (1, M) if mode == "u" else (2, T)
        coords = model.coords_u if mode == "u" else model.coords_v
        spec = KernelSpec(lengthscale=ell)
        K = build_factor_covariance(coords, spec)
        coeff = factor_coefficients(state.factors, mode, 0)
        H = dense_h(mask, coeff, k, nk)
        mvec = unfold(mask, k).reshape(-1, order="F")
        yobs = unfold(resid, k).reshape(-1, order="F")[mvec]
        sigma = H @ K @ H.T + np.eye(int(mask.sum())) / tau
        dense_ll = multivariate_normal.logpdf(yobs, mean=np.zeros(yobs.size), cov=sigma)
        mu = np.log(10.0)
        prior = -0.5 * np.log(2 * np.pi) - 0.5 * (np.log(ell) - mu) ** 2
        fast = lengthscale_logmarginal(model, state, mode, 0, ell, resid, tau)
        np.testing.assert_allclose(fast, dense_ll + prior, atol=1e-8)


def test_lengthscale_marginal_empty_mask_is_prior_only():
    model = make_model(np.zeros((3, 2, 2), dtype=bool))
    state = init_global_state(model, 1, named_rng(11, "s"))
    ell = 2.0
    val = lengthscale_logmarginal(model, state, "u", 0, ell, np.zeros((3, 2, 2)), 1.0)
    prior = -0.5 * np.log(2 * np.pi) - 0.5 * (np.log(ell) - np.log(10.0)) ** 2
    np.testing.assert_allclose(val, prior, atol=1e-12)


def test_lengthscale_marginal_invariant_to_observation_order(rng):
    # the masked-tensor formulation has no enumeration order at all; verify
    # against a dense evaluation that enumerates observations shuffled
    mask = rng.random((3, 2, 2)) < 0.7
    y = rng.standard_normal((3, 2, 2))
    model = make_model(mask)
    state = init_global_state(model, 1, named_rng(12, "s"))
    resid = np.where(mask, y, 0.0)
    ell, tau = 1.7, 1.2
    K = build_factor_covariance(model.coords_u, KernelSpec(lengthscale=ell))
    coeff = factor_coefficients(state.factors, "u", 0)
    H = dense_h(mask, coeff, 1, 3)
    mvec = unfold(mask, 1).reshape(-1, order="F")
    yobs = unfold(resid, 1).reshape(-1, order="F")[mvec]
    shuffle = rng.permutation(yobs.size)
    sigma = (H @ K @ H.T)[np.ix_(shuffle, shuffle)] + np.eye(yobs.size) / tau
    dense_ll = multivariate_normal.logpdf(yobs[shuffle], mean=np.zeros(yobs.size), cov=sigma)
    prior = -0.5 * np.log(2 * np.pi) - 0.5 * (np.log(ell) - np.log(10.0)) ** 2
    fast = lengthscale_logmarginal(model, state, "u", 0, ell, resid, tau)
    np.testing.assert_allclose(fast, dense_ll + prior, atol=1e-8)


def test_lengthscale_update_concentrates_on_strong_prior():
    # near-zero factor coefficients make the likelihood flat, so the
    # posterior of the log length-scale collapses to its prior
    rng = named_rng(13, "conc")
    mask = np.ones((4, 3, 1), dtype=bool)
    model = make_model(mask, tau_phi=100.0, tau_delta=100.0)
    state = init_global_state(model, 1, rng)
    state.factors.V[:] = 1e-8
    state.factors.W[:] = 1e-8
    resid = np.zeros((4, 3, 1))
    chain = []
    for _ in range(800):
        update_column_lengthscales(model, state, 0, resid, 1.0, rng)
        chain.append(state.log_phi[0])
    chain = np.asarray(chain[100:])
    mu = np.log(10.0)
    assert abs(chain.mean() - mu) < 0.1  # prior sd is 0.1
    assert abs(chain.std() - 0.1) < 0.05


def test_lengthscale_update_is_single_site():
    rng = named_rng(14, "single")
    mask = np.ones((4, 3, 2), dtype=bool)
    model = make_model(mask)
    state = init_global_state(model, 3, rng)
    before_phi = state.log_phi.copy()
    before_delta = state.log_delta.copy()
    resid = rng.standard_normal((4, 3, 2))
    update_column_lengthscales(model, state, 1, resid, 1.0, rng)
    assert state.log_phi[0] == before_phi[0] and state.log_phi[2] == before_phi[2]
    assert state.log_delta[0] == before_delta[0] and state.log_delta[2] == before_delta[2]


def test_lengthscale_update_seed_deterministic():
    mask = np.ones((4, 3, 1), dtype=bool)
    resid = named_rng(15, "data").standard_normal((4, 3, 1))
    results = []
    for _ in range(2):
        rng = named_rng(16, "chain")
        model = make_model(mask)
        state = init_global_state(model, 1, rng)
        update_column_lengthscales(model, state, 0, resid, 1.0, rng)
        results.append((state.log_phi[0], state.log_delta[0]))
    assert results[0] == results[1]


def test_batch_lengthscale_update_matches_per_column(rng):
    mask = rng.random((5, 4, 2)) < 0.8
    y = np.where(mask, rng.standard_normal((5, 4, 2)), 0.0)
    model = make_model(mask)
    from tensorimpute.global_sampler import update_global_lengthscales
    from tensorimpute.tensors import cp_reconstruct

    state_a = init_global_state(model, 2, named_rng(30, "s"))
    state_b = init_global_state(model, 2, named_rng(30, "s"))
    update_global_lengthscales(model, state_a, y, 1.3, named_rng(31, "r"))

    gen = named_rng(31, "r")
    maskf = mask.astype(float)
    resid_all = y - maskf * cp_reconstruct(state_b.factors)
    for d in range(2):
        rank1 = np.einsum(
            "m,t,p->mtp", state_b.factors.U[:, d], state_b.factors.V[:, d], state_b.factors.W[:, d]
        )
        update_column_lengthscales(model, state_b, d, resid_all + maskf * rank1, 1.3, gen)
    np.testing.assert_array_equal(state_a.log_phi, state_b.log_phi)
    np.testing.assert_array_equal(state_a.log_delta, state_b.log_delta)


def test_white_kernel_skips_lengthscale_sampling():
    rng = named_rng(17, "white")
    mask = np.ones((3, 3, 1), dtype=bool)
    model = make_model(mask, kernel_u=KernelSpec("white"), kernel_v=KernelSpec("white"))
    state = init_global_state(model, 1, rng)
    np.testing.assert_allclose(state.kinv_u[0], np.eye(3) / (1 + 1e-6), atol=1e-9)
    before = (state.log_phi.copy(), state.log_delta.copy())
    update_column_lengthscales(model, state, 0, rng.standard_normal((3, 3, 1)), 1.0, rng)
    np.testing.assert_array_equal(state.log_phi, before[0])
    np.testing.assert_array_equal(state.log_delta, before[1])


@pytest.mark.slow
def test_marginal_cost_scales_with_factor_dim_not_observations():
    # runtime with |obs| = 10 M should stay within 4x of |obs| = M
    rng = named_rng(18, "scaling")
    M, T, P = 60, 40, 1
    y = rng.standard_normal((M, T, P))

    def timed(mask):
        model = make_model(mask)
        state = init_global_state(model, 1, rng)
        resid = np.where(mask, y, 0.0)
        lengthscale_logmarginal(model, state, "u", 0, 2.0, resid, 1.0)  # warm up
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            for _ in range(10):
                lengthscale_logmarginal(model, state, "u", 0, 2.0, resid, 1.0)
            best = min(best, time.perf_counter() - t0)
        return best

    flat = np.zeros(M * T * P, dtype=bool)
    flat[:M] = True
    small = flat.reshape((M, T, P))
    flat10 = np.zeros(M * T * P, dtype=bool)
    flat10[: 10 * M] = True
    large = flat10.reshape((M, T, P))
    assert timed(large) < 4.0 * timed(small)


@pytest.mark.slow
def test_gibbs_micro_model_matches_grid_posterior():
    """Alternating u/v draws on a (2,2,1) rank-1 model with w and all
    hyperparameters fixed: second moments of the chain agree with dense
    numerical integration of the exact posterior on a 4-D grid."""
    rng = named_rng(19, "micro")
    M, T, P = 2, 2, 1
    mask = np.ones((M, T, P), dtype=bool)
    y = np.array([0.9, -0.4, 0.6, 1.1]).reshape(M, T, 1)
    tau = 4.0
    model = make_model(mask)
    state = init_global_state(model, 1, rng)
    state.factors.W[:, 0] = 1.0
    K_u = build_factor_covariance(model.coords_u, KernelSpec())
    K_v = build_factor_covariance(model.coords_v, KernelSpec())

    # grid oracle over (u1, u2, v1, v2)
    grid = np.linspace(-4.2, 4.2, 57)
    U1, U2, V1, V2 = np.meshgrid(grid, grid, grid, grid, indexing="ij")
    Kui = np.linalg.inv(K_u)
    Kvi = np.linalg.inv(K_v)
    log_p = -0.5 * (
        Kui[0, 0] * U1**2 + 2 * Kui[0, 1] * U1 * U2 + Kui[1, 1] * U2**2
        + Kvi[0, 0] * V1**2 + 2 * Kvi[0, 1] * V1 * V2 + Kvi[1, 1] * V2**2
    )
    for (m, t), val in np.ndenumerate(y[:, :, 0]):
        Um = U1 if m == 0 else U2
        Vt = V1 if t == 0 else V2
        log_p = log_p - 0.5 * tau * (val - Um * Vt) ** 2
    w = np.exp(log_p - log_p.max())
    w /= w.sum()

    def grid_mean(expr):
        return float((w * expr).sum())

    moments_exact = {
        "u1u1": grid_mean(U1 * U1),
        "u1u2": grid_mean(U1 * U2),
        "u2u2": grid_mean(U2 * U2),
        "v1v1": grid_mean(V1 * V1),
        "v1v2": grid_mean(V1 * V2),
        "v2v2": grid_mean(V2 * V2),
        "u1v1": grid_mean(U1 * V1),
        "u2v2": grid_mean(U2 * V2),
    }

    n_sweeps = 100_000
    resid = np.where(mask, y, 0.0)
    chains = {key: np.empty(n_sweeps) for key in moments_exact}
    for i in range(n_sweeps):
        sample_factor(model, state, "u", 0, resid, tau, rng)
        sample_factor(model, state, "v", 0, resid, tau, rng)
        u, v = state.factors.U[:, 0], state.factors.V[:, 0]
        chains["u1u1"][i] = u[0] * u[0]
        chains["u1u2"][i] = u[0] * u[1]
        chains["u2u2"][i] = u[1] * u[1]
        chains["v1v1"][i] = v[0] * v[0]
        chains["v1v2"][i] = v[0] * v[1]
        chains["v2v2"][i] = v[1] * v[1]
        chains["u1v1"][i] = u[0] * v[0]
        chains["u2v2"][i] = u[1] * v[1]
    burn = 2000
    for key, exact in moments_exact.items():
        chain = chains[key][burn:]
        se = batch_means_se(chain)
        tol = 3.0 * se + 0.01  # grid discretization allowance
        assert abs(chain.mean() - exact) < tol, (key, chain.mean(), exact, se)
