"""Shared oracle helpers for the test suite.

These deliberately re-derive quantities the library computes via fast
paths: dense selection matrices, explicitly formed Kronecker products,
and brute-force loops, so fast-path and oracle stay independent.
"""

import numpy as np
import pytest

from tensorimpute.tensors import unfold


def kron3(k1, k2, k3):
    """Dense K3 (x) K2 (x) K1 acting on vectorized (M, T, P) arrays."""
    return np.kron(np.asarray(k3), np.kron(np.asarray(k2), np.asarray(k1)))


def dense_selection(mask, mode):
    """O_k: rows of the identity at observed positions of the mode-k vec."""
    mvec = unfold(np.asarray(mask, dtype=bool), mode).reshape(-1, order="F")
    return np.eye(mvec.size)[mvec]


def dense_h(mask, coeff, mode, nk):
    """H = O_k ((coeff) (x) I_nk) built explicitly."""
    O = dense_selection(mask, mode)
    return O @ np.kron(np.asarray(coeff)[:, None], np.eye(nk))


def batch_means_se(chain, n_batches=50):
    """Autocorrelation-aware standard error of a scalar chain mean."""
    chain = np.asarray(chain, dtype=np.float64)
    n = chain.size // n_batches * n_batches
    batches = chain[:n].reshape(n_batches, -1).mean(axis=1)
    return batches.std(ddof=1) / np.sqrt(n_batches)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
