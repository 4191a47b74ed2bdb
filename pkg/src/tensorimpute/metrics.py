"""Point and probabilistic scores for held-out entries."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DimensionError, ParameterError

__all__ = [
    "mae",
    "rmse",
    "crps_gaussian",
    "interval_score",
    "coverage",
    "psnr",
    "ScoreReport",
    "PSNR_CAP",
]

PSNR_CAP = 99.0


def _check_pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.size != yhat.size:
        raise DimensionError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size == 0:
        raise DimensionError("cannot score an empty set of entries")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def rmse(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def _phi(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * z**2) / math.sqrt(2.0 * math.pi)


def crps_gaussian(y, yhat, sigma) -> float:
    """Mean CRPS of Gaussian predictive marginals N(yhat_i, sigma_i^2).

    Evaluated as -mean(sigma * [1/sqrt(pi) - 2*pdf(z) - z*(2*cdf(z) - 1)])
    with z = (y - yhat)/sigma, which equals the usual closed form
    sigma * [z*(2*cdf(z)-1) + 2*pdf(z) - 1/sqrt(pi)]; always >= 0, lower
    is better.
    """
    y, yhat = _check_pair(y, yhat)
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if sigma.size == 1:
        sigma = np.full_like(y, sigma[0])
    if sigma.size != y.size:
        raise DimensionError(f"sigma length {sigma.size} != {y.size}")
    if np.any(sigma <= 0):
        raise ParameterError("sigma must be strictly positive")
    z = (y - yhat) / sigma
    per_entry = sigma * (1.0 / math.sqrt(math.pi) - 2.0 * _phi(z) - z * (2.0 * ndtr(z) - 1.0))
    return float(-np.mean(per_entry))


def interval_score(y, lower, upper, alpha: float = 0.05) -> float:
    """Interval score at level 1 - alpha: width plus scaled excursion penalties."""
    y, lower = _check_pair(y, lower)
    upper = np.asarray(upper, dtype=np.float64).ravel()
    if upper.size != y.size:
        raise DimensionError(f"upper length {upper.size} != {y.size}")
    if np.any(lower > upper):
        raise ParameterError("interval bounds are crossed (lower > upper)")
    width = upper - lower
    below = np.maximum(lower - y, 0.0)
    above = np.maximum(y - upper, 0.0)
    return float(np.mean(width + (2.0 / alpha) * (below + above)))


def coverage(y, lower, upper) -> float:
    """Fraction of y inside the closed interval [lower, upper]."""
    y, lower = _check_pair(y, lower)
    upper = np.asarray(upper, dtype=np.float64).ravel()
    if upper.size != y.size:
        raise DimensionError(f"upper length {upper.size} != {y.size}")
    if np.any(lower > upper):
        raise ParameterError("interval bounds are crossed (lower > upper)")
    return float(np.mean((y >= lower) & (y <= upper)))


def psnr(y, yhat, max_value: float) -> float:
    """Peak signal-to-noise ratio 10*log10(max^2 / MSE); capped at 99.0 when MSE = 0."""
    if max_value <= 0:
        raise ParameterError(f"max_value must be > 0, got {max_value}")
    y, yhat = _check_pair(y, yhat)
    mse = float(np.mean((y - yhat) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(max_value**2 / mse)), PSNR_CAP)


@dataclass
class ScoreReport:
    """Bundle of scores over n held-out entries."""

    mae: float
    rmse: float
    crps: float
    int_score: float
    cvg: float
    psnr: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ParameterError("a score report needs at least one entry")
        if not 0.0 <= self.cvg <= 1.0:
            raise ParameterError(f"coverage must lie in [0, 1], got {self.cvg}")
        if self.mae > self.rmse + 1e-12:
            raise ParameterError(f"mae {self.mae} exceeds rmse {self.rmse}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_predictions(
        cls,
        y,
        yhat,
        sigma,
        lower,
        upper,
        alpha: float = 0.05,
        psnr_max: float | None = None,
    ) -> "ScoreReport":
        y = np.asarray(y, dtype=np.float64).ravel()
        if psnr_max is None:
            psnr_max = float(np.max(np.abs(y))) if np.max(np.abs(y)) > 0 else 1.0
        return cls(
            mae=mae(y, yhat),
            rmse=rmse(y, yhat),
            crps=crps_gaussian(y, yhat, sigma),
            int_score=interval_score(y, lower, upper, alpha=alpha),
            cvg=coverage(y, lower, upper),
            psnr=psnr(y, yhat, psnr_max),
            n=int(y.size),
        )
