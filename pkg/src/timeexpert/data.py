"""Series ingestion, benchmark splits, windowing, synthetic corpora and anomaly injection."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, EmptySplit, InvalidArgument, MissingFile, NonNumericCell, ParseError
from .numerics import Rng

STD_EPS = 1e-5
SPLIT_PROTOCOLS = {"ett": (0.6, 0.2, 0.2), "general": (0.7, 0.1, 0.2)}
ANOMALY_KINDS = ("abrupt_outlier", "periodicity_deviation", "zero_imputation")
_MISSING = {"", "na", "nan", "null", "none", "n/a", "?"}


@dataclass
class Series:
    name: str
    values: np.ndarray  # [T, C]
    channels: list[str]
    timestamps: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[1] != len(self.channels):
            raise InvalidArgument(f"{self.values.shape[1]} columns but {len(self.channels)} channel names")
        if not np.isfinite(self.values).all():
            raise InvalidArgument("series contains non-finite values")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "Series":
        return replace(self, values=np.array(values, dtype=np.float64))


@dataclass(frozen=True)
class SplitSpec:
    protocol: str = "ett"
    ratios: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.protocol not in SPLIT_PROTOCOLS and self.protocol != "custom":
            raise ConfigError(f"unknown split protocol {self.protocol!r}")
        r = self.resolved_ratios()
        if len(r) != 3 or min(r) < 0 or abs(sum(r) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {r}")

    def resolved_ratios(self) -> tuple[float, float, float]:
        if self.ratios is not None:
            return tuple(self.ratios)
        return SPLIT_PROTOCOLS.get(self.protocol, (1.0, 0.0, 0.0))

    def boundaries(self, length: int) -> dict[str, tuple[int, int]]:
        """[start, end) of each split; test and train sizes are floored, val takes the rest."""
        r_train, _, r_test = self.resolved_ratios()
        n_train = int(length * r_train)
        n_test = int(length * r_test)
        n_val = length - n_train - n_test
        return {
            "train": (0, n_train),
            "val": (n_train, n_train + n_val),
            "test": (n_train + n_val, length),
        }


@dataclass
class WindowSet:
    """Lookback/target pairs, stacked: ``inputs [n, L, C]`` and ``targets [n, H, C]``."""

    inputs: np.ndarray
    targets: np.ndarray
    anchors: np.ndarray  # index of the first target step of each window

    def __len__(self) -> int:
        return len(self.anchors)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return self.inputs[i], self.targets[i]
        return WindowSet(self.inputs[i], self.targets[i], self.anchors[i])

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for i in range(len(self)):
            yield self.inputs[i], self.targets[i]


@dataclass
class AnomalySpec:
    kind: str
    position: int
    length: int
    magnitude: float = 5.0
    seed: int = 0
    channel: int | None = None  # None: every channel
    period: float | None = None  # periodicity_deviation; estimated when absent

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ConfigError(f"unknown anomaly kind {self.kind!r}")
        if self.position < 0 or self.length < 0:
            raise InvalidArgument("anomaly position and length must be non-negative")


# ---- loading ------------------------------------------------------------------

def load_csv(path: str | os.PathLike, name: str | None = None) -> Series:
    """Read an ETT-style CSV: header row, first column a date string, the rest numeric."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingFile(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 0, 0) from None
        if len(header) < 2:
            raise ParseError("need a date column and at least one value column", 1, 0)
        rows, stamps = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row_no, len(row))
            stamps.append(row[0])
            vals = []
            for col_no, cell in enumerate(row[1:], start=2):
                text = cell.strip()
                if text.lower() in _MISSING:
                    raise ParseError(f"missing value {cell!r}", row_no, col_no)
                try:
                    v = float(text)
                except ValueError:
                    raise NonNumericCell(f"non-numeric cell {cell!r}", row_no, col_no) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value {cell!r}", row_no, col_no)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows", 1, 0)
    return Series(name or os.path.splitext(os.path.basename(path))[0],
                  np.array(rows), list(header[1:]), stamps)


def save_csv(series: Series, path: str | os.PathLike) -> None:
    stamps = series.timestamps or [str(i) for i in range(series.length)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *series.channels])
        for stamp, row in zip(stamps, series.values):
            w.writerow([stamp, *(repr(float(v)) for v in row)])


# ---- standardization and windows --------------------------------------------------

def standardize(series: Series, train_end: int) -> tuple[Series, np.ndarray, np.ndarray]:
    """Z-score every channel with mean/std of ``values[:train_end]``."""
    if train_end < 1:
        raise EmptySplit("training split is empty")
    train = series.values[:train_end]
    mu = train.mean(axis=0)
    sigma = train.std(axis=0)
    return series.with_values((series.values - mu) / (sigma + STD_EPS)), mu, sigma


def unstandardize(values: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return values * (sigma + STD_EPS) + mu


def window_anchors(length: int, start: int, end: int, lookback: int, horizon: int,
                   stride: int = 1) -> np.ndarray:
    """First-target indices of every window whose target lies in [start, end).

    The lookback may reach back before ``start`` but never before index 0.
    """
    first = max(start, lookback)
    last = min(end, length) - horizon
    if last < first:
        return np.zeros(0, dtype=np.int64)
    return np.arange(first, last + 1, stride, dtype=np.int64)


def make_windows(series: Series | np.ndarray, split: SplitSpec | None = None, lookback: int = 96,
                 horizon: int = 96, stride: int = 1, part: str = "train") -> WindowSet:
    """Enumerate windows of one split in time order.

    With ``split=None`` the whole series is a single split.
    """
    values = series.values if isinstance(series, Series) else np.asarray(series, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if stride < 1:
        raise InvalidArgument("stride must be >= 1")
    length = len(values)
    start, end = (0, length) if split is None else split.boundaries(length)[part]
    anchors = window_anchors(length, start, end, lookback, horizon, stride)
    if len(anchors) == 0:
        raise EmptySplit(f"split {part!r} [{start}, {end}) too short for lookback {lookback} + horizon {horizon}")
    idx_in = anchors[:, None] - lookback + np.arange(lookback)[None, :]
    idx_out = anchors[:, None] + np.arange(horizon)[None, :]
    return WindowSet(values[idx_in], values[idx_out], anchors)


@dataclass
class Dataset:
    """A standardized series with its split and the train statistics."""

    series: Series
    split: SplitSpec
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def prepare(cls, series: Series, split: SplitSpec | None = None) -> "Dataset":
        split = split or SplitSpec()
        train_end = split.boundaries(series.length)["train"][1]
        std_series, mu, sigma = standardize(series, train_end)
        return cls(std_series, split, mu, sigma)

    def windows(self, part: str, lookback: int, horizon: int, stride: int = 1) -> WindowSet:
        return make_windows(self.series, self.split, lookback, horizon, stride, part)


# ---- synthetic series -------------------------------------------------------------

def hourly_stamps(length: int, start: str = "2016-07-01T00:00") -> list[str]:
    base = np.datetime64(start, "h")
    return [str(base + np.timedelta64(i, "h")).replace("T", " ") + ":00:00" for i in range(length)]


def synth_series(periods: Sequence[float], amplitudes: Sequence[float] | None = None,
                 noise: float = 0.0, length: int = 2000, channels: int = 1, seed: int = 0,
                 name: str = "synthetic", random_phase: bool = True) -> Series:
    """Sum of sinusoids per channel plus Gaussian noise, all seeded."""
    periods = list(periods)
    amplitudes = [1.0] * len(periods) if amplitudes is None else list(amplitudes)
    if len(amplitudes) != len(periods):
        raise InvalidArgument("periods and amplitudes differ in length")
    rng = Rng(seed)
    phases = rng.uniform((channels, len(periods)), 0.0, 2 * math.pi) if random_phase \
        else np.zeros((channels, len(periods)))
    t = np.arange(length, dtype=np.float64)[:, None]
    values = np.zeros((length, channels))
    for j, (p, a) in enumerate(zip(periods, amplitudes)):
        values += a * np.sin(2 * math.pi * t / p + phases[None, :, j])
    if noise > 0:
        values += rng.normal((length, channels), 0.0, noise)
    stamps = hourly_stamps(length)
    return Series(name, values, [f"ch{c}" for c in range(channels)], stamps)


# ---- anomalies --------------------------------------------------------------------

def dominant_period(x: np.ndarray) -> float:
    """Period (in samples) of the strongest non-DC Fourier component."""
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    spec = np.abs(np.fft.rfft(x))
    if len(spec) < 2:
        return float(len(x))
    k = int(np.argmax(spec[1:])) + 1
    return len(x) / k


def _fit_sinusoid(x: np.ndarray, period: float) -> tuple[float, float, float]:
    """Least-squares offset + A sin(2 pi t / P + phi); returns (offset, A, phi)."""
    t = np.arange(len(x), dtype=np.float64)
    w = 2 * math.pi * t / period
    design = np.stack([np.ones_like(t), np.sin(w), np.cos(w)], axis=1)
    (c0, cs, cc), *_ = np.linalg.lstsq(design, x, rcond=None)
    return float(c0), float(math.hypot(cs, cc)), float(math.atan2(cc, cs))


def inject_anomaly(series: Series | np.ndarray, spec: AnomalySpec) -> tuple[Series | np.ndarray, np.ndarray]:
    """Return a corrupted copy and the boolean ``[T, C]`` mask of modified cells.

    * abrupt_outlier: adds ``magnitude * std(channel)`` over the region.
    * periodicity_deviation: replaces the fitted dominant sinusoid inside the
      region with one of 1.5x frequency and a pi/2 phase shift, keeping the
      residual.
    * zero_imputation: sets the region to 0.
    """
    is_series = isinstance(series, Series)
    values = np.array(series.values if is_series else series, dtype=np.float64)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    length, n_ch = values.shape
    if spec.position + spec.length > length:
        raise InvalidArgument(f"anomaly [{spec.position}, {spec.position + spec.length}) outside series of {length}")
    mask = np.zeros_like(values, dtype=bool)
    channels = range(n_ch) if spec.channel is None else [spec.channel]
    region = slice(spec.position, spec.position + spec.length)
    if spec.length > 0:
        for c in channels:
            mask[region, c] = True
            x = values[:, c]
            if spec.kind == "abrupt_outlier":
                x[region] = x[region] + spec.magnitude * x.std()
            elif spec.kind == "zero_imputation":
                x[region] = 0.0
            else:
                period = spec.period or dominant_period(x)
                offset, amp, phase = _fit_sinusoid(x, period)
                t = np.arange(spec.position, spec.position + spec.length, dtype=np.float64)
                fitted = offset + amp * np.sin(2 * math.pi * t / period + phase)
                deviated = offset + amp * np.sin(2 * math.pi * 1.5 * t / period + phase + math.pi / 2)
                x[region] = x[region] - fitted + deviated
    out = values[:, 0] if squeeze else values
    mask = mask[:, 0] if squeeze else mask
    if is_series:
        return series.with_values(out), mask
    return out, mask
