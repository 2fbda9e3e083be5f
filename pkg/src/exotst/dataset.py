"""CSV ingestion, chronological splits, windowing and exogenous corruption."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConstantColumnError,
    DataError,
    EmptyWindowError,
    MissingColumnError,
    NonNumericCellError,
    SeriesTooShortError,
    TooFewRowsError,
)
from .numerics import gaussian, make_rng

MISSING_MARKERS = ("", "nan", "NaN", "NAN")

# Driver weights for the synthetic generator; cycled when n_drivers exceeds the list.
DRIVER_COEFFICIENTS = (0.9, -0.6, 0.45, 0.3, -0.25, 0.2, 0.15, -0.1)

REGIMES = ("driver-dominant", "autoregressive")


@dataclass
class RawSeries:
    """A univariate target with M aligned exogenous drivers."""

    timestamps: list
    endogenous: np.ndarray                      # (T,)
    exogenous: np.ndarray                       # (M, T)
    names: list                                 # [target, driver_1, ..., driver_M]
    endogenous_mask: np.ndarray = None          # True where missing
    exogenous_mask: np.ndarray = None

    def __post_init__(self):
        self.endogenous = np.asarray(self.endogenous, dtype=np.float64)
        self.exogenous = np.atleast_2d(np.asarray(self.exogenous, dtype=np.float64))
        T = self.endogenous.shape[0]
        if self.exogenous.shape[1] != T or len(self.timestamps) != T:
            raise DataError("all columns must share the same length")
        if self.endogenous_mask is None:
            self.endogenous_mask = np.isnan(self.endogenous)
        if self.exogenous_mask is None:
            self.exogenous_mask = np.isnan(self.exogenous)

    @property
    def length(self):
        return self.endogenous.shape[0]

    @property
    def n_drivers(self):
        return self.exogenous.shape[0]

    @property
    def missing_mask(self):
        """Column name -> boolean array marking absent cells."""
        out = {self.names[0]: self.endogenous_mask}
        for name, m in zip(self.names[1:], self.exogenous_mask):
            out[name] = m
        return out


@dataclass
class NormStats:
    """Per-column mean/std from the training segment (column 0 is the target)."""

    mean: np.ndarray
    std: np.ndarray

    def standardize(self, y, X):
        return ((y - self.mean[0]) / self.std[0],
                (X - self.mean[1:, None]) / self.std[1:, None])

    def destandardize(self, y, X=None):
        y_raw = np.asarray(y) * self.std[0] + self.mean[0]
        if X is None:
            return y_raw
        return y_raw, np.asarray(X) * self.std[1:, None] + self.mean[1:, None]


@dataclass
class Segment:
    """A contiguous standardized slice of a series."""

    y: np.ndarray           # (T_seg,)
    X: np.ndarray           # (M, T_seg)
    start: int              # index of the first step in the full series
    y_mask: np.ndarray = None
    X_mask: np.ndarray = None

    @property
    def length(self):
        return self.y.shape[0]


@dataclass
class WindowSample:
    y_past: np.ndarray      # (L,)
    X_past: np.ndarray      # (M, L)
    X_future: np.ndarray    # (M, f)
    y_future: np.ndarray    # (f,)
    t: int = 0              # absolute index of the last past step

    @property
    def lookback(self):
        return self.y_past.shape[0]

    @property
    def horizon(self):
        return self.y_future.shape[0]


@dataclass(frozen=True)
class CorruptionSpec:
    mask_fraction: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    past: bool = True
    future: bool = True

    def validate(self):
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise DataError(f"mask_fraction must lie in [0, 1], got {self.mask_fraction}")
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")


@dataclass
class Splits:
    train: Segment
    val: Segment
    test: Segment
    stats: NormStats
    names: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.train, self.val, self.test, self.stats))


def _parse_cell(cell, row, col):
    cell = cell.strip()
    if cell in MISSING_MARKERS:
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise NonNumericCellError(
            f"non-numeric cell {cell!r} in column {col!r}, data row {row + 1}") from None


def load_csv(path, target_column) -> RawSeries:
    """Read a header-first CSV whose first column is a timestamp."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise TooFewRowsError(f"{path}: empty file")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    if target_column not in header[1:]:
        raise MissingColumnError(f"target column {target_column!r} not found in {path}")
    if len(body) < 2:
        raise TooFewRowsError(f"{path}: need at least 2 data rows, found {len(body)}")
    values = np.empty((len(body), len(header) - 1))
    timestamps = []
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"data row {i + 1} has {len(row)} cells, header has {len(header)}")
        timestamps.append(row[0].strip())
        for j, cell in enumerate(row[1:]):
            values[i, j] = _parse_cell(cell, i, header[j + 1])
    _check_increasing(timestamps)
    cols = header[1:]
    t_idx = cols.index(target_column)
    exo_idx = [j for j in range(len(cols)) if j != t_idx]
    return RawSeries(
        timestamps=timestamps,
        endogenous=values[:, t_idx],
        exogenous=values[:, exo_idx].T.reshape(len(exo_idx), -1),
        names=[target_column] + [cols[j] for j in exo_idx],
    )


def _check_increasing(timestamps):
    """Integer/float stamps compare numerically, anything else (ISO-8601) as text."""
    try:
        keys = [float(t) for t in timestamps]
    except ValueError:
        keys = list(timestamps)
    for i in range(1, len(keys)):
        if not keys[i] > keys[i - 1]:
            raise DataError(f"timestamps must be strictly increasing; row {i + 1} ({timestamps[i]!r}) "
                            f"does not follow {timestamps[i - 1]!r}")


def write_csv(series: RawSeries, path, time_column="time"):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([time_column] + list(series.names))
        for i, ts in enumerate(series.timestamps):
            row = [ts, _fmt(series.endogenous[i])]
            row += [_fmt(v) for v in series.exogenous[:, i]]
            w.writerow(row)


def _fmt(v):
    return "NaN" if math.isnan(v) else repr(float(v))


def split_lengths(T):
    """Chronological 7:1:2 segment lengths."""
    n_train = (7 * T) // 10
    n_val = T // 10
    return n_train, n_val, T - n_train - n_val


def split_and_standardize(series: RawSeries, lookback=None, horizon=None) -> Splits:
    """Split 7:1:2 in time and standardize every segment with train statistics.

    Missing cells are excluded from the statistics and then set to 0 in
    standardized space (train-mean imputation).
    """
    T = series.length
    if lookback is not None and horizon is not None and T < lookback + horizon + 10:
        raise SeriesTooShortError(
            f"series length {T} < lookback {lookback} + horizon {horizon} + 10")
    n_train, n_val, n_test = split_lengths(T)
    if min(n_train, n_val, n_test) < 1:
        raise SeriesTooShortError(f"series length {T} too short for a 7:1:2 split")
    cols = np.vstack([series.endogenous[None, :], series.exogenous])
    masks = np.vstack([series.endogenous_mask[None, :], series.exogenous_mask])
    train = cols[:, :n_train]
    tmask = masks[:, :n_train]
    mean = np.empty(cols.shape[0])
    std = np.empty(cols.shape[0])
    for c in range(cols.shape[0]):
        vals = train[c][~tmask[c]]
        if vals.size == 0:
            raise ConstantColumnError(f"column {series.names[c]!r} has no observed training values")
        mean[c] = vals.mean()
        std[c] = vals.std()
        if not std[c] > 0:
            raise ConstantColumnError(f"column {series.names[c]!r} is constant on the training segment")
    stats = NormStats(mean, std)
    z = (cols - mean[:, None]) / std[:, None]
    z[masks] = 0.0
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, T)]
    segs = [Segment(y=z[0, a:b].copy(), X=z[1:, a:b].copy(), start=a,
                    y_mask=masks[0, a:b].copy(), X_mask=masks[1:, a:b].copy())
            for a, b in bounds]
    return Splits(*segs, stats=stats, names=list(series.names))


def window_count(T_seg, lookback, horizon, stride):
    if T_seg < lookback + horizon:
        return 0
    return (T_seg - lookback - horizon) // stride + 1


def make_windows(segment: Segment, lookback, horizon, stride=1) -> list[WindowSample]:
    """Windows at offsets 0, s, 2s, ... each with L past and f future steps."""
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    n = window_count(segment.length, lookback, horizon, stride)
    if n == 0:
        raise EmptyWindowError(
            f"segment of length {segment.length} is shorter than lookback {lookback} + horizon {horizon}")
    out = []
    for w in range(n):
        o = w * stride
        p, e = o + lookback, o + lookback + horizon
        out.append(WindowSample(
            y_past=segment.y[o:p].copy(),
            X_past=segment.X[:, o:p].copy(),
            X_future=segment.X[:, p:e].copy(),
            y_future=segment.y[p:e].copy(),
            t=segment.start + p - 1,
        ))
    return out


def corrupt(samples, spec: CorruptionSpec):
    """Mask and/or add Gaussian noise to exogenous cells; targets are untouched.

    Masked cells are chosen uniformly without replacement from a seeded
    permutation, so a larger fraction under the same seed masks a superset.
    Noise uses the same seeded standard-normal draw scaled by ``noise_sigma``.
    """
    spec.validate()
    if spec.mask_fraction == 0 and spec.noise_sigma == 0:
        return [replace(s) for s in samples]
    parts = []
    if spec.past:
        parts.append("X_past")
    if spec.future:
        parts.append("X_future")
    flat = np.concatenate([getattr(s, p).ravel() for s in samples for p in parts]) \
        if parts and samples else np.empty(0)
    n = flat.size
    rng = make_rng(spec.seed)
    order = rng.permutation(n)
    z = gaussian(rng, (n,))
    n_mask = int(round(spec.mask_fraction * n))
    masked = np.zeros(n, dtype=bool)
    masked[order[:n_mask]] = True
    out_flat = flat.copy()
    if spec.noise_sigma > 0:
        out_flat = out_flat + spec.noise_sigma * z
    out_flat[masked] = 0.0
    out, pos = [], 0
    for s in samples:
        new = replace(s)
        for p in parts:
            arr = getattr(s, p)
            setattr(new, p, out_flat[pos:pos + arr.size].reshape(arr.shape))
            pos += arr.size
        out.append(new)
    return out


def _smooth_driver(rng, length):
    n_waves = 3
    periods = rng.uniform(4.0, 16.0, size=n_waves)
    amps = rng.uniform(0.3, 1.0, size=n_waves)
    phases = rng.uniform(0.0, 2 * math.pi, size=n_waves)
    t = np.arange(length, dtype=np.float64)
    x = np.zeros(length)
    for p, a, ph in zip(periods, amps, phases):
        x += a * np.sin(2 * math.pi * t / p + ph)
    eta = gaussian(rng, (length,), sigma=0.3)
    ar = np.empty(length)
    prev = 0.0
    for i in range(length):
        prev = 0.9 * prev + eta[i]
        ar[i] = prev
    return x + ar


def synth_generate(length, n_drivers, seed, regime="driver-dominant",
                   coefficients=None, noise_std=0.05, y0=0.0) -> RawSeries:
    """Synthetic series whose target is driven by ``n_drivers`` smooth drivers.

    Each driver is a sum of three seeded sinusoids plus AR(1) noise
    (phi=0.9, innovation std 0.3). The target follows

    * ``driver-dominant``: y_t = sum_m a_m x^m_t + 0.2 y_{t-1} + eps_t
    * ``autoregressive``:  y_t = 0.95 y_{t-1} + 0.05 sum_m a_m x^m_t + eps_t

    with eps_t ~ N(0, noise_std^2) and a_m from ``DRIVER_COEFFICIENTS``.
    """
    if regime not in REGIMES:
        raise DataError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if length < 400:
        raise DataError(f"length must be >= 400, got {length}")
    if n_drivers < 1:
        raise DataError(f"n_drivers must be >= 1, got {n_drivers}")
    if coefficients is None:
        coefficients = [DRIVER_COEFFICIENTS[m % len(DRIVER_COEFFICIENTS)] for m in range(n_drivers)]
    a = np.asarray(coefficients, dtype=np.float64)
    if a.shape != (n_drivers,):
        raise DataError(f"expected {n_drivers} coefficients, got {a.shape}")
    rng = make_rng(seed)
    X = np.stack([_smooth_driver(rng, length) for _ in range(n_drivers)])
    eps = gaussian(rng, (length,), sigma=noise_std) if noise_std > 0 else np.zeros(length)
    drive = np.zeros(length)
    for m in range(n_drivers):
        drive += a[m] * X[m]
    y = driver_recursion(drive, eps, regime, y0)
    return RawSeries(
        timestamps=[str(i) for i in range(length)],
        endogenous=y,
        exogenous=X,
        names=["y"] + [f"x{m + 1}" for m in range(n_drivers)],
    )


def driver_recursion(drive, eps, regime, y0=0.0):
    """Run the target recursion given the combined driver signal."""
    if regime == "driver-dominant":
        own, ext = 0.2, 1.0
    else:
        own, ext = 0.95, 0.05
    y = np.empty_like(drive)
    prev = y0
    for t in range(drive.shape[0]):
        prev = ext * drive[t] + own * prev + eps[t]
        y[t] = prev
    return y
