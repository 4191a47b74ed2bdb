"""Probabilistic completion of third-order tensors.

The model couples a low-rank CP mean with Gaussian-process priors on the
factor columns and an additive short-range GP residual whose covariance
is made sparse by compactly supported tapers.  Inference is a Gibbs
sweep with slice-sampled kernel hyperparameters; posterior summaries and
scoring utilities round out the library, and :mod:`tensorimpute.cli`
exposes the batch pipeline.
"""

from .engine import Hyperpriors, McmcConfig, McmcResult, run_mcmc, sample_tau
from .kernels import KernelSpec, TaperSpec
from .metrics import ScoreReport, coverage, crps_gaussian, interval_score, mae, psnr, rmse
from .posterior import PosteriorSamples, summarize
from .synthetic import apply_missing, generate_synthetic
from .tensors import CPFactors, SpatioTensor, cp_reconstruct, unfold, vectorize

__version__ = "0.1.0"

__all__ = [
    "CPFactors",
    "Hyperpriors",
    "KernelSpec",
    "McmcConfig",
    "McmcResult",
    "PosteriorSamples",
    "ScoreReport",
    "SpatioTensor",
    "TaperSpec",
    "apply_missing",
    "coverage",
    "cp_reconstruct",
    "crps_gaussian",
    "generate_synthetic",
    "interval_score",
    "mae",
    "psnr",
    "rmse",
    "run_mcmc",
    "sample_tau",
    "summarize",
    "unfold",
    "vectorize",
    "__version__",
]
