"""Synthetic field generation and missing-pattern construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import named_rng
from .errors import ConfigError, ParameterError
from .tensors import SpatioTensor

__all__ = ["generate_synthetic", "synthetic_field", "apply_missing", "MaskResult", "SCENARIOS"]

SCENARIOS = ("rm", "nm", "sbm", "quadrant")

QUADRANT_DIAG_RATE = 0.6
QUADRANT_OFFDIAG_RATE = 0.8


def _f1(s: np.ndarray) -> np.ndarray:
    return s * (np.sin(2.0 * s) + 2.0)


def _f2(s: np.ndarray) -> np.ndarray:
    return 0.2 * s * np.sqrt(99.0 * (s + 1.0) + 4.0)


def synthetic_field(n1: int = 100, n2: int = 100) -> np.ndarray:
    """Noiseless nonstationary surface on a uniform grid over [-1, 3]^2."""
    s1 = np.linspace(-1.0, 3.0, n1)
    s2 = np.linspace(-1.0, 3.0, n2)
    a = _f1(s1)[:, None] + _f2(s2)[None, :]
    b = _f1(s2)[None, :] - _f2(s1)[:, None]
    return np.cos(4.0 * a) + np.sin(4.0 * b)


def generate_synthetic(
    n1: int = 100,
    n2: int = 100,
    noise_var: float = 0.01,
    seed: int = 0,
) -> SpatioTensor:
    """Noisy synthetic surface as a fully observed (n1, n2, 1) tensor."""
    if n1 < 2 or n2 < 2:
        raise ParameterError("grid must be at least 2 x 2")
    if noise_var < 0:
        raise ParameterError(f"noise variance must be >= 0, got {noise_var}")
    field = synthetic_field(n1, n2)
    rng = named_rng(seed, "synth")
    noisy = field + np.sqrt(noise_var) * rng.standard_normal(field.shape)
    return SpatioTensor(noisy[:, :, None], np.ones((n1, n2, 1), dtype=bool))


@dataclass
class MaskResult:
    """Training tensor plus the mask of held-out (newly hidden) entries."""

    train: SpatioTensor
    test_mask: np.ndarray
    achieved_rate: float


def _mask_random(mask: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    observed = np.flatnonzero(mask.ravel())
    n_hide = int(np.floor(rate * observed.size))
    hide = rng.choice(observed, size=n_hide, replace=False)
    out = np.zeros(mask.size, dtype=bool)
    out[hide] = True
    return out.reshape(mask.shape)


def _mask_tubes(mask: np.ndarray, rate: float, axis: int, rng: np.random.Generator) -> np.ndarray:
    """Hide whole fibers along ``axis`` until the hidden fraction reaches ``rate``."""
    M, T, P = mask.shape
    if axis == 1:  # tubes (m, :, p)
        tubes = [(m, p) for m in range(M) for p in range(P)]
    else:  # axis == 0: tubes (:, t, p)
        tubes = [(t, p) for t in range(T) for p in range(P)]
    order = rng.permutation(len(tubes))
    target = rate * mask.sum()
    hidden = np.zeros_like(mask)
    total = 0
    for pos in order:
        if total >= target:
            break
        i, p = tubes[pos]
        if axis == 1:
            tube = mask[i, :, p]
            hidden[i, :, p] = tube
        else:
            tube = mask[:, i, p]
            hidden[:, i, p] = tube
        total += int(tube.sum())
    return hidden


def _mask_quadrant(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Split the first two dims at their midpoints; hide 60% of the observed
    entries in the two diagonal blocks and 80% in the off-diagonal blocks."""
    M, T, _ = mask.shape
    m_half, t_half = M // 2, T // 2
    hidden = np.zeros_like(mask)
    for i, (m_sl, t_sl) in enumerate(
        [
            (slice(0, m_half), slice(0, t_half)),
            (slice(m_half, M), slice(t_half, T)),
            (slice(0, m_half), slice(t_half, T)),
            (slice(m_half, M), slice(0, t_half)),
        ]
    ):
        rate = QUADRANT_DIAG_RATE if i < 2 else QUADRANT_OFFDIAG_RATE
        sub = np.zeros_like(mask)
        sub[m_sl, t_sl, :] = mask[m_sl, t_sl, :]
        hidden |= _mask_random(sub, rate, rng)
    return hidden


def apply_missing(
    tensor: SpatioTensor,
    scenario: str,
    rate: float | None = None,
    seed: int = 0,
) -> MaskResult:
    """Hide entries of an observed tensor according to a missing scenario.

    ``rm`` hides a fixed fraction of observed entries uniformly; ``nm``
    hides whole (m, :, p) fibers and ``sbm`` whole (:, t, p) fibers until
    the hidden fraction reaches the rate; ``quadrant`` applies the fixed
    60/80% split over the four blocks of the first two dimensions.  The
    returned test mask marks exactly the newly hidden, originally
    observed entries.
    """
    scenario = scenario.lower()
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    rng = named_rng(seed, "mask")
    if scenario == "quadrant":
        hidden = _mask_quadrant(tensor.mask, rng)
    else:
        if rate is None or not 0.0 < rate < 1.0:
            raise ConfigError(f"scenario {scenario!r} needs a rate in (0, 1), got {rate}")
        if scenario == "rm":
            hidden = _mask_random(tensor.mask, rate, rng)
        elif scenario == "nm":
            hidden = _mask_tubes(tensor.mask, rate, axis=1, rng=rng)
        else:  # sbm
            hidden = _mask_tubes(tensor.mask, rate, axis=0, rng=rng)
    hidden &= tensor.mask
    train_mask = tensor.mask & ~hidden
    train_values = np.where(train_mask, tensor.values, np.nan)
    n_obs = tensor.mask.sum()
    achieved = float(hidden.sum() / n_obs) if n_obs else 0.0
    return MaskResult(
        train=SpatioTensor(train_values, train_mask),
        test_mask=hidden,
        achieved_rate=achieved,
    )
