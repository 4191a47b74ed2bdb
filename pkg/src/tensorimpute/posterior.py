"""Retained-sample reduction and posterior summaries.

Reconstructions are streamed into running first/second moments plus a
per-entry quantile accumulator.  When the retained volume is small the
accumulator stores every value and quantiles are exact; above the
threshold it switches to a vectorized P-squared estimator with five
markers per entry and quantile, so memory stays independent of the
number of retained sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

__all__ = [
    "P2Quantile",
    "PosteriorSamples",
    "Summary",
    "summarize",
    "EXACT_STORAGE_LIMIT",
]

# max entries * retained sweeps stored exactlyity; beyond this, stream
EXACT_STORAGE_LIMIT = 10**8


class P2Quantile:
    """Vectorized P-squared running quantile estimator.

    Tracks one target quantile for ``n_entries`` independent streams with
    five markers each; positions and heights follow the classic marker
    update with parabolic interpolation and linear fallback.
    """

    def __init__(self, n_entries: int, p: float):
        if not 0.0 < p < 1.0:
            raise ConfigError(f"quantile must lie strictly inside (0, 1), got {p}")
        self.p = float(p)
        self.n_entries = int(n_entries)
        self.count = 0
        self._seed = np.empty((5, n_entries))
        self.heights = np.empty((0, 0))
        self.pos = np.empty((0, 0))
        self._dn = np.array([0.0, p / 2.0, p, (1.0 + p) / 2.0, 1.0])

    def add(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.n_entries:
            raise DimensionError(f"batch of {x.size} values for {self.n_entries} streams")
        if self.count < 5:
            self._seed[self.count] = x
            self.count += 1
            if self.count == 5:
                self.heights = np.sort(self._seed, axis=0)
                self.pos = np.tile(np.arange(5, dtype=np.float64)[:, None], (1, self.n_entries))
                del self._seed
            return
        self.count += 1
        h = self.heights
        npos = self.pos

        # locate the cell of each new value, clamping the extreme markers
        below = x < h[0]
        above = x >= h[4]
        h[0] = np.where(below, x, h[0])
        h[4] = np.where(above, np.maximum(x, h[4]), h[4])
        k = (x[None, :] >= h[:4]).sum(axis=0)  # in 1..4 after clamping
        k = np.clip(k, 1, 4)

        shift = np.arange(5)[:, None] >= k[None, :]
        npos += shift
        desired = (self.count - 1) * self._dn[:, None] * np.ones((1, self.n_entries))

        for i in (1, 2, 3):
            d = desired[i] - npos[i]
            gap_up = npos[i + 1] - npos[i]
            gap_dn = npos[i - 1] - npos[i]
            move_up = (d >= 1.0) & (gap_up > 1.0)
            move_dn = (d <= -1.0) & (gap_dn < -1.0)
            sgn = np.where(move_up, 1.0, np.where(move_dn, -1.0, 0.0))
            active = sgn != 0.0
            if not np.any(active):
                continue
            denom = npos[i + 1] - npos[i - 1]
            left = (npos[i] - npos[i - 1] + sgn) * (h[i + 1] - h[i]) / np.where(
                gap_up == 0, 1.0, gap_up
            )
            right = (npos[i + 1] - npos[i] - sgn) * (h[i] - h[i - 1]) / np.where(
                gap_dn == 0, 1.0, -gap_dn
            )
            parab = h[i] + sgn / np.where(denom == 0, 1.0, denom) * (left + right)
            ok = (h[i - 1] < parab) & (parab < h[i + 1])
            nbr = np.where(sgn > 0, h[i + 1], h[i - 1])
            nbr_pos = np.where(sgn > 0, npos[i + 1], npos[i - 1])
            linear = h[i] + sgn * (nbr - h[i]) / np.where(nbr_pos == npos[i], 1.0, nbr_pos - npos[i])
            new_h = np.where(ok, parab, linear)
            h[i] = np.where(active, new_h, h[i])
            npos[i] = npos[i] + np.where(active, sgn, 0.0)

    def estimate(self) -> np.ndarray:
        if self.count == 0:
            raise ConfigError("no values accumulated")
        if self.count < 5:
            vals = np.sort(self._seed[: self.count], axis=0)
            return np.quantile(vals, self.p, axis=0)
        return self.heights[2].copy()

    def memory_bytes(self) -> int:
        arrays = [self.heights, self.pos]
        if self.count < 5:
            arrays.append(self._seed)
        return int(sum(a.nbytes for a in arrays))


@dataclass
class Summary:
    """Per-entry posterior summary tensors, each shaped (M, T, P)."""

    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


class PosteriorSamples:
    """Streaming reduction of retained reconstructions plus full traces.

    ``add_reconstruction`` consumes the raw reconstruction (for mean and
    std, population denominator) and an interval sample which may include
    a fresh observation-noise draw; interval endpoints come from the
    per-entry quantiles of the interval samples.
    """

    def __init__(
        self,
        dims: tuple[int, int, int],
        n_retain: int,
        level: float = 0.95,
        exact: bool | None = None,
    ):
        if n_retain < 1:
            raise ConfigError("need at least one retained sweep")
        if not 0.0 < level < 1.0:
            raise ConfigError(f"interval level must lie in (0, 1), got {level}")
        self.dims = tuple(int(d) for d in dims)
        self.size = int(np.prod(self.dims))
        self.n_retain = int(n_retain)
        self.level = float(level)
        if exact is None:
            exact = self.size * n_retain <= EXACT_STORAGE_LIMIT
        if not exact and n_retain < 5:
            raise ConfigError("streaming quantiles need at least 5 retained sweeps")
        self.exact = bool(exact)
        self.n_added = 0
        self._mean = np.zeros(self.size)
        self._m2 = np.zeros(self.size)
        alpha = 1.0 - level
        if self.exact:
            self._store = np.empty((n_retain, self.size))
            self._lo_sketch = self._hi_sketch = None
        else:
            self._store = None
            self._lo_sketch = P2Quantile(self.size, alpha / 2.0)
            self._hi_sketch = P2Quantile(self.size, 1.0 - alpha / 2.0)
        self.traces: dict[str, list] = {}

    def add_reconstruction(self, raw: np.ndarray, interval_sample: np.ndarray) -> None:
        raw = np.asarray(raw, dtype=np.float64).ravel()
        if raw.size != self.size:
            raise DimensionError(f"reconstruction of length {raw.size}, expected {self.size}")
        if self.n_added >= self.n_retain:
            raise ConfigError("more reconstructions than retained sweeps")
        self.n_added += 1
        delta = raw - self._mean
        self._mean += delta / self.n_added
        self._m2 += delta * (raw - self._mean)
        interval_sample = np.asarray(interval_sample, dtype=np.float64).ravel()
        if self.exact:
            self._store[self.n_added - 1] = interval_sample
        else:
            self._lo_sketch.add(interval_sample)
            self._hi_sketch.add(interval_sample)

    def add_trace(self, **values) -> None:
        for key, val in values.items():
            self.traces.setdefault(key, []).append(val)

    def trace_array(self, key: str) -> np.ndarray:
        return np.asarray(self.traces.get(key, []))

    @property
    def complete(self) -> bool:
        return self.n_added == self.n_retain

    def mean(self) -> np.ndarray:
        return self._mean.copy()

    def std(self) -> np.ndarray:
        if self.n_added < 2:
            raise ConfigError("std needs at least two retained sweeps")
        return np.sqrt(self._m2 / self.n_added)

    def interval(self, level: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        if self.exact:
            lvl = self.level if level is None else float(level)
            alpha = 1.0 - lvl
            vals = self._store[: self.n_added]
            lower = np.quantile(vals, alpha / 2.0, axis=0)
            upper = np.quantile(vals, 1.0 - alpha / 2.0, axis=0)
            return lower, upper
        if level is not None and abs(level - self.level) > 1e-12:
            raise ConfigError(
                f"streaming sketch was built for level {self.level}, cannot produce {level}"
            )
        return self._lo_sketch.estimate(), self._hi_sketch.estimate()

    def memory_bytes(self) -> int:
        total = self._mean.nbytes + self._m2.nbytes
        if self.exact:
            total += self._store.nbytes
        else:
            total += self._lo_sketch.memory_bytes() + self._hi_sketch.memory_bytes()
        return int(total)

    def state_dict(self) -> dict:
        """Everything needed to regenerate summaries later."""
        out = {
            "dims": np.asarray(self.dims),
            "n_retain": self.n_retain,
            "n_added": self.n_added,
            "level": self.level,
            "exact": self.exact,
            "mean_acc": self._mean,
            "m2_acc": self._m2,
        }
        if self.exact:
            out["store"] = self._store[: self.n_added]
        else:
            out["lo_heights"] = self._lo_sketch.heights
            out["lo_pos"] = self._lo_sketch.pos
            out["lo_count"] = self._lo_sketch.count
            out["hi_heights"] = self._hi_sketch.heights
            out["hi_pos"] = self._hi_sketch.pos
            out["hi_count"] = self._hi_sketch.count
        for key, vals in self.traces.items():
            out[f"trace_{key}"] = np.asarray(vals)
        return out

    @classmethod
    def from_state_dict(cls, data: dict) -> "PosteriorSamples":
        dims = tuple(int(d) for d in np.asarray(data["dims"]))
        obj = cls(dims, int(data["n_retain"]), float(data["level"]), exact=bool(data["exact"]))
        obj.n_added = int(data["n_added"])
        obj._mean = np.asarray(data["mean_acc"], dtype=np.float64)
        obj._m2 = np.asarray(data["m2_acc"], dtype=np.float64)
        if obj.exact:
            store = np.asarray(data["store"])
            obj._store[: store.shape[0]] = store
        else:
            obj._lo_sketch.heights = np.asarray(data["lo_heights"])
            obj._lo_sketch.pos = np.asarray(data["lo_pos"])
            obj._lo_sketch.count = int(data["lo_count"])
            obj._hi_sketch.heights = np.asarray(data["hi_heights"])
            obj._hi_sketch.pos = np.asarray(data["hi_pos"])
            obj._hi_sketch.count = int(data["hi_count"])
        for key in data:
            if key.startswith("trace_"):
                obj.traces[key[len("trace_"):]] = list(np.asarray(data[key]))
        return obj


def summarize(samples: PosteriorSamples, level: float | None = None) -> Summary:
    """Per-entry mean, std and central interval from the retained sweeps."""
    lower, upper = samples.interval(level)
    dims = samples.dims
    return Summary(
        mean=samples.mean().reshape(dims, order="F"),
        std=samples.std().reshape(dims, order="F"),
        lower=lower.reshape(dims, order="F"),
        upper=upper.reshape(dims, order="F"),
        level=samples.level if level is None else float(level),
    )
