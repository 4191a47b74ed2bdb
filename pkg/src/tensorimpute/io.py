"""File formats, run configuration and manifests.

Binary container layouts (all little-endian):

* tensor file: magic ``BCKL``, u32 version, three u64 dims, then
  M*T*P float64 values in vectorization order with missing entries
  written as the canonical quiet NaN.
* matrix file: magic ``BCKM``, u32 version, two u64 dims, then
  column-major float64 payload.

Masks reuse the tensor container with a 0.0/1.0 payload.  Long-format
CSV (``m,t,p,value`` with 1-based indices) is accepted for real
datasets.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import Hyperpriors, McmcConfig
from .errors import ConfigError, DataFormatError
from .kernels import KernelSpec, TaperSpec
from .tensors import SpatioTensor, unvectorize, vectorize

__all__ = [
    "write_tensor",
    "read_tensor",
    "write_mask",
    "read_mask",
    "write_matrix",
    "read_matrix",
    "read_long_csv",
    "RunConfig",
    "load_run_config",
    "config_hash",
    "write_manifest",
]

TENSOR_MAGIC = b"BCKL"
MATRIX_MAGIC = b"BCKM"
FORMAT_VERSION = 1

_CANONICAL_NAN = np.float64(np.nan)


def write_tensor(path: str | Path, tensor: SpatioTensor) -> None:
    payload = vectorize(tensor.values).astype("<f8").copy()
    payload[~vectorize(tensor.mask)] = _CANONICAL_NAN
    M, T, P = tensor.dims
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<QQQ", M, T, P))
        fh.write(payload.tobytes())


def read_tensor(path: str | Path) -> SpatioTensor:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TENSOR_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise DataFormatError(f"{path}: unsupported format version {version}")
        dims = struct.unpack("<QQQ", fh.read(24))
        n = dims[0] * dims[1] * dims[2]
        raw = fh.read(8 * n)
        if len(raw) != 8 * n:
            raise DataFormatError(f"{path}: truncated payload ({len(raw)} of {8 * n} bytes)")
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after payload")
    payload = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    values = unvectorize(payload, dims)  # type: ignore[arg-type]
    return SpatioTensor(values, ~np.isnan(values))


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    write_tensor(path, SpatioTensor(mask.astype(np.float64), np.ones_like(mask)))


def read_mask(path: str | Path) -> np.ndarray:
    tensor = read_tensor(path)
    vals = tensor.values
    if not tensor.mask.all() or not np.isin(vals, (0.0, 1.0)).all():
        raise DataFormatError(f"{path}: mask payload must be 0/1 with no missing entries")
    return vals.astype(bool)


def write_matrix(path: str | Path, mat: np.ndarray) -> None:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise DataFormatError(f"matrix payload must be 2-D, got shape {mat.shape}")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<QQ", *mat.shape))
        fh.write(np.asfortranarray(mat).astype("<f8").tobytes(order="F"))


def read_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MATRIX_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {MATRIX_MAGIC!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise DataFormatError(f"{path}: unsupported format version {version}")
        rows, cols = struct.unpack("<QQ", fh.read(16))
        raw = fh.read(8 * rows * cols)
        if len(raw) != 8 * rows * cols:
            raise DataFormatError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype="<f8").reshape((rows, cols), order="F").copy()


def read_long_csv(path: str | Path, dims: tuple[int, int, int] | None = None) -> SpatioTensor:
    """Load a long-format CSV with 1-based ``m,t,p,value`` rows."""
    rows: list[tuple[int, int, int, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, parts in enumerate(reader, start=1):
            if not parts or not parts[0].strip():
                continue
            if lineno == 1 and not parts[0].strip().lstrip("-").isdigit():
                continue  # header
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            try:
                m, t, p = (int(v) for v in parts[:3])
                val = float(parts[3])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            if min(m, t, p) < 1:
                raise DataFormatError(f"{path}:{lineno}: indices are 1-based")
            rows.append((m, t, p, val))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    arr = np.asarray(rows)
    if dims is None:
        dims = tuple(int(d) for d in arr[:, :3].max(axis=0))  # type: ignore[assignment]
    values = np.full(dims, np.nan)
    idx = arr[:, :3].astype(int) - 1
    if (idx >= np.asarray(dims)).any():
        raise DataFormatError(f"{path}: index exceeds dims {dims}")
    values[idx[:, 0], idx[:, 1], idx[:, 2]] = arr[:, 3]
    return SpatioTensor(values, ~np.isnan(values))


# --- run configuration ------------------------------------------------------

_KERNEL_KEYS = {"family", "lengthscale", "variance", "matrix_path"}
_TAPER_KEYS = {"family", "range"}
_HYPERPRIOR_KEYS = {
    "mu_phi",
    "tau_phi",
    "mu_delta",
    "tau_delta",
    "mu_theta",
    "tau_theta",
    "a0",
    "b0",
    "nu0",
}
_TOP_KEYS = {
    "seed",
    "input",
    "output_dir",
    "rank",
    "n_local",
    "burnin",
    "samples",
    "kernel_u",
    "kernel_v",
    "local_base1",
    "local_base2",
    "taper1",
    "taper2",
    "k3_mode",
    "hyperpriors",
    "pcg_tol",
    "pcg_max_iter",
    "tau_imag",
    "interval_includes_noise",
    "interval_level",
    "exact_quantiles",
    "coords_u",
    "coords_v",
    "truth",
    "test_mask",
}


@dataclass
class RunConfig:
    """Validated fit configuration: the sampler config plus file paths."""

    input: str
    output_dir: str
    mcmc: McmcConfig
    raw: dict = field(repr=False, default_factory=dict)
    truth: str | None = None
    test_mask: str | None = None


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _check_keys(obj: dict, allowed: set, where: str) -> None:
    unknown = set(obj) - allowed
    _require(not unknown, f"unknown keys in {where}: {sorted(unknown)}")


def _parse_kernel(obj: dict | None, where: str, base_dir: Path, default: str) -> KernelSpec:
    if obj is None:
        return KernelSpec(family=default)
    _require(isinstance(obj, dict), f"{where} must be an object")
    _check_keys(obj, _KERNEL_KEYS, where)
    family = obj.get("family", default)
    matrix = None
    if family == "precomputed":
        _require("matrix_path" in obj, f"{where}: precomputed kernel needs matrix_path")
        matrix = read_matrix(base_dir / obj["matrix_path"])
    return KernelSpec(
        family=family,
        lengthscale=float(obj.get("lengthscale", 1.0)),
        variance=float(obj.get("variance", 1.0)),
        matrix=matrix,
    )


def _parse_taper(obj: dict | None, where: str) -> TaperSpec:
    if obj is None:
        return TaperSpec()
    _require(isinstance(obj, dict), f"{where} must be an object")
    _check_keys(obj, _TAPER_KEYS, where)
    return TaperSpec(family=obj.get("family", "bohman"), range_=float(obj.get("range", 10.0)))


def load_run_config(path: str | Path) -> RunConfig:
    """Parse and validate a fit configuration JSON document."""
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    _require(isinstance(doc, dict), "config root must be an object")
    _check_keys(doc, _TOP_KEYS, "config")
    for key in ("input", "output_dir"):
        _require(key in doc, f"config is missing required key {key!r}")
    base_dir = path.parent

    hp_doc = doc.get("hyperpriors", {}) or {}
    _check_keys(hp_doc, _HYPERPRIOR_KEYS, "hyperpriors")
    hp_defaults = Hyperpriors()
    hp = Hyperpriors(
        **{k: float(hp_doc.get(k, getattr(hp_defaults, k))) for k in _HYPERPRIOR_KEYS if k != "nu0"},
        nu0=float(hp_doc["nu0"]) if "nu0" in hp_doc else None,
    )

    mcmc = McmcConfig(
        rank=int(doc.get("rank", 10)),
        n_local=int(doc.get("n_local", 2)),
        burnin=int(doc.get("burnin", 1000)),
        samples=int(doc.get("samples", 500)),
        kernel_u=_parse_kernel(doc.get("kernel_u"), "kernel_u", base_dir, "squared-exponential"),
        kernel_v=_parse_kernel(doc.get("kernel_v"), "kernel_v", base_dir, "squared-exponential"),
        local_base1=_parse_kernel(
            doc.get("local_base1"), "local_base1", base_dir, "squared-exponential"
        ),
        local_base2=_parse_kernel(
            doc.get("local_base2"), "local_base2", base_dir, "squared-exponential"
        ),
        taper1=_parse_taper(doc.get("taper1"), "taper1"),
        taper2=_parse_taper(doc.get("taper2"), "taper2"),
        k3_mode=doc.get("k3_mode", "diagonal"),
        hyperpriors=hp,
        seed=int(doc.get("seed", 0)),
        pcg_tol=float(doc.get("pcg_tol", 1e-8)),
        pcg_max_iter=int(doc.get("pcg_max_iter", 1000)),
        tau_imag=float(doc.get("tau_imag", 1e-6)),
        interval_includes_noise=bool(doc.get("interval_includes_noise", True)),
        interval_level=float(doc.get("interval_level", 0.95)),
        exact_quantiles=doc.get("exact_quantiles"),
        coords_u=np.asarray(doc["coords_u"], dtype=np.float64) if "coords_u" in doc else None,
        coords_v=np.asarray(doc["coords_v"], dtype=np.float64) if "coords_v" in doc else None,
    )
    return RunConfig(
        input=str(base_dir / doc["input"]),
        output_dir=str(base_dir / doc["output_dir"]),
        mcmc=mcmc,
        raw=doc,
        truth=str(base_dir / doc["truth"]) if "truth" in doc else None,
        test_mask=str(base_dir / doc["test_mask"]) if "test_mask" in doc else None,
    )


def config_hash(doc: dict) -> str:
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def write_manifest(path: str | Path, doc: dict, extra: dict | None = None) -> None:
    import scipy

    from . import __version__

    manifest = {
        "config": doc,
        "config_hash": config_hash(doc),
        "seed": doc.get("seed", 0),
        "versions": {
            "tensorimpute": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
