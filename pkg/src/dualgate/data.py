"""Series loading, supervised windows, instance normalization, splits, synthetic data."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DataError", "MultivariateSeries", "SeriesWindow", "WindowSet", "NormStats",
    "SyntheticSpec", "SyntheticData", "load_series_csv", "save_series_csv",
    "make_windows", "stack_windows", "window_count", "instance_normalize",
    "normalize_batch", "denormalize", "chrono_split", "make_synthetic",
]

STD_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed series data or an impossible windowing/split request."""


@dataclass
class MultivariateSeries:
    timestamps: np.ndarray  # int64, strictly increasing
    values: np.ndarray      # (T_total, C) float64
    channel_names: list[str]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError("series needs at least one row and one channel")
        if self.timestamps.shape != (self.values.shape[0],):
            raise DataError("timestamps and values disagree on length")
        if len(self.channel_names) != self.values.shape[1]:
            raise DataError("channel_names does not match the number of value columns")
        bad = np.flatnonzero(np.diff(self.timestamps) <= 0)
        if bad.size:
            raise DataError(f"timestamps not strictly increasing at row {bad[0] + 1}")

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


def load_series_csv(path) -> MultivariateSeries:
    """Read ``timestamp,<name1>,...,<nameC>`` CSV.

    Row numbers in errors count data rows from 1 (the header is row 0).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2 or header[0] != "timestamp":
            raise DataError(f"{path}: header must be 'timestamp,<channel>...', got {header!r}")
        names = header[1:]
        stamps, rows = [], []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
            try:
                stamps.append(int(row[0]))
            except ValueError:
                raise DataError(f"{path}: row {r}, column 'timestamp': not an integer: {row[0]!r}") from None
            vals = []
            for name, cell in zip(names, row[1:]):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {r}, column {name!r}: not a number: {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    stamps = np.array(stamps, dtype=np.int64)
    bad = np.flatnonzero(np.diff(stamps) <= 0)
    if bad.size:
        raise DataError(f"{path}: timestamp at row {bad[0] + 2} is not after the previous row")
    return MultivariateSeries(stamps, np.array(rows, dtype=np.float64), names)


def save_series_csv(path, series: MultivariateSeries) -> None:
    """Write with shortest round-trip float formatting so a reload is bit-exact."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", *series.channel_names])
    for ts, row in zip(series.timestamps, series.values):
        w.writerow([int(ts), *(repr(float(v)) for v in row)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


@dataclass
class SeriesWindow:
    x_in: np.ndarray   # (L, C)
    x_out: np.ndarray  # (S, C)
    end_ts: int


@dataclass
class WindowSet:
    """Stacked windows: ``x_in`` (W, L, C), ``x_out`` (W, S, C), ``end_ts`` (W,)."""
    x_in: np.ndarray
    x_out: np.ndarray
    end_ts: np.ndarray

    def __len__(self):
        return self.x_in.shape[0]

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.x_in[idx], self.x_out[idx], self.end_ts[idx])


def window_count(t_total: int, lookback: int, horizon: int, stride: int = 1) -> int:
    if lookback + horizon > t_total:
        return 0
    return (t_total - lookback - horizon) // stride + 1


def make_windows(series: MultivariateSeries, lookback: int, horizon: int, stride: int = 1) -> list[SeriesWindow]:
    if lookback < 1 or horizon < 1:
        raise DataError("lookback and horizon must be >= 1")
    if stride < 1:
        raise DataError("stride must be >= 1")
    t_total = len(series)
    if lookback + horizon > t_total:
        raise DataError(f"insufficient data: need {lookback + horizon} rows, have {t_total}")
    out = []
    for start in range(0, t_total - lookback - horizon + 1, stride):
        mid = start + lookback
        out.append(SeriesWindow(series.values[start:mid].copy(),
                                series.values[mid:mid + horizon].copy(),
                                int(series.timestamps[mid - 1])))
    return out


def stack_windows(windows: list[SeriesWindow]) -> WindowSet:
    if not windows:
        raise DataError("no windows to stack")
    return WindowSet(np.stack([w.x_in for w in windows]),
                     np.stack([w.x_out for w in windows]),
                     np.array([w.end_ts for w in windows], dtype=np.int64))


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def instance_normalize(window: SeriesWindow) -> tuple[SeriesWindow, NormStats]:
    """Standardize each channel with statistics of the lookback only.

    The target block is scaled with the same statistics.
    """
    mu = window.x_in.mean(axis=0)
    sd = np.maximum(window.x_in.std(axis=0), STD_FLOOR)
    return (SeriesWindow((window.x_in - mu) / sd, (window.x_out - mu) / sd, window.end_ts),
            NormStats(mu, sd))


def normalize_batch(x_in: np.ndarray) -> tuple[np.ndarray, NormStats]:
    """Batched form of :func:`instance_normalize` over ``x_in`` of shape (B, L, C)."""
    mu = x_in.mean(axis=1, keepdims=True)
    sd = np.maximum(x_in.std(axis=1, keepdims=True), STD_FLOOR)
    return (x_in - mu) / sd, NormStats(mu, sd)


def denormalize(pred: np.ndarray, stats: NormStats) -> np.ndarray:
    return pred * stats.std + stats.mean


def chrono_split(windows, ratios=(0.7, 0.1, 0.2)):
    """Partition by window index into contiguous train/val/test blocks.

    Adjacent windows overlap in time, so targets of the last training windows
    fall inside the lookbacks of the first validation windows.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(windows)
    n_train = int(np.floor(n * ratios[0] + 1e-9))
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"{n} windows give an empty split with ratios {ratios}")
    if isinstance(windows, WindowSet):
        take = windows.subset
    else:
        def take(s):
            return windows[s]
    return (take(slice(0, n_train)), take(slice(n_train, n_train + n_val)),
            take(slice(n_train + n_val, n)))


# ---------------------------------------------------------------- synthetic benchmark

REGIME_PHRASES = ("strong decrease", "weak decrease", "weak increase", "strong increase")


@dataclass
class SyntheticSpec:
    """Piecewise-linear benchmark whose text announces the next segment's regime.

    ``slopes`` are listed from strongest decline to strongest rise; the index
    of a slope is its regime label.
    """
    slopes: tuple[float, float, float, float] = (-1.0, -0.25, 0.25, 1.0)
    segment_len: tuple[int, int] = (6, 10)
    noise_sigma: float = 0.05
    alpha: float = 2.0
    text_noise_sigma: float = 0.1
    text_dim: int = 32
    n_steps: int = 2039
    n_channels: int = 1
    start_ts: int = 1_700_000_000
    step_seconds: int = 3600
    seed: int = 0

    def __post_init__(self):
        self.slopes = tuple(float(s) for s in self.slopes)
        self.segment_len = tuple(int(s) for s in self.segment_len)
        if len(self.slopes) != 4 or len(set(self.slopes)) != 4:
            raise DataError("need four pairwise distinct slopes")
        if list(self.slopes) != sorted(self.slopes):
            raise DataError("slopes must be in increasing order")
        if min(self.noise_sigma, self.text_noise_sigma) < 0:
            raise DataError("noise levels must be >= 0")
        lo, hi = self.segment_len
        if not 1 <= lo <= hi:
            raise DataError(f"bad segment_len range {self.segment_len}")
        if self.text_dim < 4:
            raise DataError("text_dim must hold a four-way one-hot")
        if self.n_steps < 2 or self.n_channels < 1:
            raise DataError("need n_steps >= 2 and n_channels >= 1")


@dataclass
class SyntheticData:
    series: MultivariateSeries
    embeddings: np.ndarray     # (T_total, text_dim), one per timestamp
    docs: list = field(repr=False)  # list[TextDoc]
    segment_id: np.ndarray     # (T_total,)
    regime: np.ndarray         # regime label of the segment each step belongs to
    next_regime: np.ndarray    # regime of the segment after the one each step belongs to
    segment_bounds: list[tuple[int, int]] = field(repr=False)


def make_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Generate the benchmark; a pure function of ``spec``.

    Each step's embedding is ``alpha * onehot(next segment's regime)`` plus
    Gaussian noise, so the text at time t carries information about the
    series after t that the lookback does not.
    """
    from .textenc import TextDoc

    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.segment_len
    bounds, labels = [], []
    pos = 0
    while pos < spec.n_steps:
        n = int(rng.integers(lo, hi + 1))
        bounds.append((pos, pos + n))
        labels.append(int(rng.integers(0, 4)))
        pos += n
    # successor of the last segment, never materialized in the series
    bounds.append((pos, pos + hi))
    labels.append(int(rng.integers(0, 4)))

    T = spec.n_steps
    seg = np.empty(T, dtype=np.int64)
    for i, (a, b) in enumerate(bounds):
        if a >= T:
            break
        seg[a:min(b, T)] = i
    labels_arr = np.array(labels, dtype=np.int64)
    regime = labels_arr[seg]
    next_regime = labels_arr[seg + 1]

    slopes = np.array(spec.slopes)
    increments = slopes[regime]
    increments[0] = 0.0
    trend = np.cumsum(increments)
    channel_scale = 1.0 + 0.5 * np.arange(spec.n_channels)
    values = trend[:, None] * channel_scale[None, :]
    if spec.noise_sigma > 0:
        values = values + rng.normal(0.0, spec.noise_sigma, size=values.shape)

    emb = np.zeros((T, spec.text_dim))
    emb[np.arange(T), next_regime] = spec.alpha
    if spec.text_noise_sigma > 0:
        emb = emb + rng.normal(0.0, spec.text_noise_sigma, size=emb.shape)

    ts = spec.start_ts + spec.step_seconds * np.arange(T, dtype=np.int64)
    names = [f"v{c + 1}" for c in range(spec.n_channels)]
    docs = [TextDoc(int(t), int(t), f"Outlook after this report: a {REGIME_PHRASES[r]} is expected.")
            for t, r in zip(ts, next_regime)]
    return SyntheticData(MultivariateSeries(ts, values, names), emb, docs, seg, regime, next_regime,
                         [b for b in bounds if b[0] < T])
