"""Batch command-line interface.

Subcommands: ``synth`` (synthetic data), ``mask`` (missing scenarios),
``fit`` (MCMC), ``summarize`` (regenerate summaries from a stored run),
``eval`` (score against held-out truth).  Exit codes: 0 success, 1 usage
error, 2 data/schema error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .engine import run_mcmc
from .errors import (
    ConfigError,
    DataFormatError,
    FactorizationError,
    SolverError,
    TensorImputeError,
)
from .io import (
    RunConfig,
    config_hash,
    load_run_config,
    read_mask,
    read_tensor,
    write_manifest,
    write_mask,
    write_tensor,
)
from .metrics import ScoreReport
from .posterior import PosteriorSamples, summarize
from .synthetic import apply_missing, generate_synthetic
from .tensors import SpatioTensor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SOLVER = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise SystemExit(self._usage_exit(message))

    def _usage_exit(self, message: str) -> int:
        print(f"error: {message}", file=sys.stderr)
        return EXIT_USAGE


def _build_parser() -> _Parser:
    parser = _Parser(prog="tensorimpute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_synth = sub.add_parser("synth", help="generate the synthetic test surface")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--n1", type=int, default=100)
    p_synth.add_argument("--n2", type=int, default=100)
    p_synth.add_argument("--noise-var", type=float, default=0.01)

    p_mask = sub.add_parser("mask", help="hide entries under a missing scenario")
    p_mask.add_argument("--in", dest="input", required=True)
    p_mask.add_argument("--scenario", required=True, choices=["rm", "nm", "sbm", "quadrant"])
    p_mask.add_argument("--rate", type=float, default=None)
    p_mask.add_argument("--seed", type=int, default=0)
    p_mask.add_argument("--train", required=True)
    p_mask.add_argument("--test-mask", required=True)

    p_fit = sub.add_parser("fit", help="run the MCMC sampler")
    p_fit.add_argument("--config", required=True)

    p_summ = sub.add_parser("summarize", help="regenerate summaries from a stored run")
    p_summ.add_argument("--run", required=True)

    p_eval = sub.add_parser("eval", help="score a run against held-out truth")
    p_eval.add_argument("--run", required=True)
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--test-mask", required=True)
    p_eval.add_argument("--psnr-max", type=float, default=None)
    p_eval.add_argument("--alpha", type=float, default=0.05)
    return parser


def _cmd_synth(args: argparse.Namespace) -> int:
    tensor = generate_synthetic(args.n1, args.n2, args.noise_var, args.seed)
    write_tensor(args.out, tensor)
    print(f"wrote {args.out} dims={tensor.dims}")
    return EXIT_OK


def _cmd_mask(args: argparse.Namespace) -> int:
    if args.scenario != "quadrant" and args.rate is None:
        print(f"error: scenario {args.scenario!r} requires --rate", file=sys.stderr)
        return EXIT_USAGE
    tensor = read_tensor(args.input)
    result = apply_missing(tensor, args.scenario, args.rate, args.seed)
    write_tensor(args.train, result.train)
    write_mask(args.test_mask, result.test_mask)
    print(
        f"wrote {args.train} and {args.test_mask}; "
        f"hidden fraction {result.achieved_rate:.4f}"
    )
    return EXIT_OK


def _write_summaries(run_dir: Path, samples: PosteriorSamples) -> None:
    summary = summarize(samples)
    full = np.ones(summary.mean.shape, dtype=bool)
    write_tensor(run_dir / "mean.bckl", SpatioTensor(summary.mean, full))
    write_tensor(run_dir / "std.bckl", SpatioTensor(summary.std, full))
    write_tensor(run_dir / "lower.bckl", SpatioTensor(summary.lower, full))
    write_tensor(run_dir / "upper.bckl", SpatioTensor(summary.upper, full))


def _write_trace_csv(run_dir: Path, samples: PosteriorSamples) -> None:
    phi = samples.trace_array("phi")
    delta = samples.trace_array("delta")
    theta1 = samples.trace_array("theta1")
    theta2 = samples.trace_array("theta2")
    tau = samples.trace_array("tau")
    pcg = samples.trace_array("pcg_iters")
    iters = samples.trace_array("iter")
    D = phi.shape[1] if phi.ndim == 2 else 0
    Q = theta1.shape[1] if theta1.ndim == 2 else 0
    header = (
        ["iter", "tau"]
        + [f"phi_{d + 1}" for d in range(D)]
        + [f"delta_{d + 1}" for d in range(D)]
        + [f"theta1_{q + 1}" for q in range(Q)]
        + [f"theta2_{q + 1}" for q in range(Q)]
        + ["pcg_iters"]
    )
    with open(run_dir / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(iters.size):
            row = [int(iters[i]), repr(float(tau[i]))]
            row += [repr(float(v)) for v in (phi[i] if D else [])]
            row += [repr(float(v)) for v in (delta[i] if D else [])]
            row += [repr(float(v)) for v in (theta1[i] if Q else [])]
            row += [repr(float(v)) for v in (theta2[i] if Q else [])]
            row.append(int(pcg[i]))
            writer.writerow(row)


def _cmd_fit(args: argparse.Namespace) -> int:
    cfg: RunConfig = load_run_config(args.config)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "log.jsonl", mode="w")
    handler.setLevel(logging.INFO)
    engine_logger = logging.getLogger("tensorimpute.engine")
    engine_logger.addHandler(handler)
    engine_logger.setLevel(logging.INFO)
    try:
        data = read_tensor(cfg.input)
        result = run_mcmc(data, cfg.mcmc)
    finally:
        engine_logger.removeHandler(handler)
        handler.close()
    samples = result.posterior
    np.savez_compressed(run_dir / "posterior_state.npz", **samples.state_dict())
    _write_summaries(run_dir, samples)
    _write_trace_csv(run_dir, samples)
    write_manifest(
        run_dir / "manifest.json",
        cfg.raw,
        extra={"pcg_failures": result.pcg_failures, "n_observed": int(data.n_observed)},
    )
    print(f"fit complete; outputs in {run_dir}")
    return EXIT_OK


def _load_posterior(run_dir: Path) -> PosteriorSamples:
    state_path = run_dir / "posterior_state.npz"
    if not state_path.exists():
        raise DataFormatError(f"{state_path} not found; run fit first")
    with np.load(state_path, allow_pickle=False) as data:
        return PosteriorSamples.from_state_dict({k: data[k] for k in data.files})


def _cmd_summarize(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    samples = _load_posterior(run_dir)
    _write_summaries(run_dir, samples)
    print(f"summaries regenerated in {run_dir}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    truth = read_tensor(args.truth)
    test_mask = read_mask(args.test_mask)
    if test_mask.shape != truth.dims:
        raise DataFormatError(
            f"test mask shape {test_mask.shape} != truth dims {truth.dims}"
        )
    if not (test_mask <= truth.mask).all():
        raise DataFormatError("test mask selects entries missing from the truth tensor")
    mean = read_tensor(run_dir / "mean.bckl").values
    std = read_tensor(run_dir / "std.bckl").values
    lower = read_tensor(run_dir / "lower.bckl").values
    upper = read_tensor(run_dir / "upper.bckl").values
    sel = test_mask
    report = ScoreReport.from_predictions(
        truth.values[sel],
        mean[sel],
        std[sel],
        lower[sel],
        upper[sel],
        alpha=args.alpha,
        psnr_max=args.psnr_max,
    )
    payload = report.to_json()
    (run_dir / "score.json").write_text(payload + "\n")
    print(payload)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "synth": _cmd_synth,
        "mask": _cmd_mask,
        "fit": _cmd_fit,
        "summarize": _cmd_summarize,
        "eval": _cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        # infeasible model requests are usage errors; schema problems are data errors
        msg = str(exc)
        print(f"error: {msg}", file=sys.stderr)
        if "rank and n_local" in msg:
            return EXIT_USAGE
        return EXIT_DATA
    except (DataFormatError, TensorImputeError) as exc:
        if isinstance(exc, (SolverError, FactorizationError)):
            print(f"solver failure: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
