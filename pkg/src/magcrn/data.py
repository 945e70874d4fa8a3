"""Station-network ingestion, calendar covariates, normalisation and windowing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConstantChannel, EmptyDataset, GridError, SchemaError, TooShort

TARGET = "no2"
WEATHER = (
    "wind_speed",
    "wind_dir",
    "temperature",
    "rel_humidity",
    "pressure",
    "solar_irradiance",
)
TRAFFIC = ("traffic_intensity", "traffic_occupancy", "traffic_load", "traffic_speed")
CALENDAR = ("hour_sin", "hour_cos", "dow_sin", "dow_cos")
CSV_CHANNELS = (TARGET,) + WEATHER + TRAFFIC
CSV_HEADER = ("timestamp", "station_id") + CSV_CHANNELS
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:00:00"

GROUPS = {"weather": WEATHER, "traffic": TRAFFIC, "calendar": CALENDAR}


@dataclass
class ImputationReport:
    missing_count: int = 0
    per_channel: dict[str, int] = field(default_factory=dict)


@dataclass
class RawDataset:
    """Hourly multi-channel series, ``values`` shaped T x N x C."""

    timestamps: np.ndarray  # datetime64[h], strictly increasing by one hour
    station_ids: tuple[str, ...]
    channels: tuple[str, ...]
    values: np.ndarray
    report: ImputationReport = field(default_factory=ImputationReport)

    @property
    def T(self) -> int:
        return len(self.timestamps)

    @property
    def N(self) -> int:
        return len(self.station_ids)

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.values[:, :, self.channels.index(name)]
        except ValueError:
            raise SchemaError(f"dataset has no channel {name!r}") from None

    def slice_time(self, start: int, stop: int) -> RawDataset:
        return replace(self, timestamps=self.timestamps[start:stop], values=self.values[start:stop])


@dataclass(frozen=True)
class CovariateSpec:
    past_channels: tuple[str, ...]
    future_channels: tuple[str, ...]

    @classmethod
    def from_groups(cls, past: Sequence[str] = ("traffic", "calendar"),
                    future: Sequence[str] = ("weather", "calendar")) -> CovariateSpec:
        def expand(groups):
            out: list[str] = []
            for g in groups:
                if g not in GROUPS:
                    raise SchemaError(f"unknown covariate group {g!r}; choose from {sorted(GROUPS)}")
                out.extend(GROUPS[g])
            return tuple(out)

        return cls(expand(past), expand(future)).validate()

    def validate(self) -> CovariateSpec:
        if not self.past_channels or not self.future_channels:
            raise SchemaError("both covariate lists need at least one channel")
        if TARGET in self.past_channels or TARGET in self.future_channels:
            raise SchemaError("the target channel cannot be a covariate")
        shared = set(self.past_channels) & set(self.future_channels)
        if shared - set(CALENDAR):
            raise SchemaError(f"only calendar channels may be shared, got {sorted(shared)}")
        return self

    @property
    def P(self) -> int:
        return len(self.past_channels)

    @property
    def F(self) -> int:
        return len(self.future_channels)


# -- ingestion ------------------------------------------------------------------


def _parse_timestamp(text: str, lineno: int) -> np.datetime64:
    try:
        return np.datetime64(datetime.strptime(text, TIMESTAMP_FORMAT), "h")
    except ValueError:
        raise SchemaError(f"line {lineno}: bad timestamp {text!r} (want YYYY-MM-DDThh:00:00)") from None


def _parse_float(text: str, lineno: int, column: str) -> float:
    if text == "":
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise SchemaError(f"line {lineno}: {column} value {text!r} is not a number") from None
    if not math.isfinite(v):
        raise SchemaError(f"line {lineno}: {column} value {text!r} is not finite")
    return v


def load_csv(path, expected_channels: Sequence[str] = CSV_CHANNELS) -> RawDataset:
    """Read the station CSV, validate the hourly grid and impute missing cells.

    Missing cells are forward-filled per station and channel; a leading gap
    takes the channel mean over the training fraction of the series.
    """
    path = Path(path)
    expected_header = ["timestamp", "station_id", *expected_channels]
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDataset(f"{path} is empty")
        if header != expected_header:
            raise SchemaError(f"header {header} does not match {expected_header}")
        rows = []
        prev_key = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected_header):
                raise SchemaError(f"line {lineno}: expected {len(expected_header)} fields, got {len(row)}")
            ts = _parse_timestamp(row[0], lineno)
            key = (ts, row[1])
            if prev_key is not None:
                if key == prev_key:
                    raise GridError(f"line {lineno}: duplicate row for station {row[1]} at {row[0]}")
                if key < prev_key:
                    raise GridError(f"line {lineno}: rows must be sorted by (timestamp, station_id)")
            prev_key = key
            vals = [_parse_float(v, lineno, c) for v, c in zip(row[2:], expected_channels)]
            rows.append((ts, row[1], vals))
    if not rows:
        raise EmptyDataset(f"{path} has a header but no rows")

    stations = tuple(sorted({r[1] for r in rows}))
    times = sorted({r[0] for r in rows})
    timestamps = np.array(times, dtype="datetime64[h]")
    if len(timestamps) > 1 and np.any(np.diff(timestamps) != np.timedelta64(1, "h")):
        raise GridError("timestamps are not on a contiguous hourly grid")
    if len(rows) != len(times) * len(stations):
        raise GridError(
            f"stations misaligned: {len(rows)} rows for {len(times)} hours x {len(stations)} stations"
        )
    # sorted input with a full grid means row order is (t, station) row-major
    values = np.array([r[2] for r in rows], dtype=np.float64).reshape(len(times), len(stations), -1)
    station_col = [r[1] for r in rows[: len(stations)]]
    if tuple(station_col) != stations:
        raise GridError("station ordering differs between hours")
    report = impute(values, tuple(expected_channels))
    return RawDataset(timestamps, stations, tuple(expected_channels), values, report)


def impute(values: np.ndarray, channels: Sequence[str]) -> ImputationReport:
    """Fill NaNs in place (T x N x C) and return the counts."""
    missing = np.isnan(values)
    report = ImputationReport(int(missing.sum()), {c: int(missing[:, :, i].sum()) for i, c in enumerate(channels)})
    if not report.missing_count:
        return report
    n_train = max(1, split_points(values.shape[0])[0])
    for ci, name in enumerate(channels):
        col = values[:, :, ci]
        if not np.isnan(col).any():
            continue
        observed = col[:n_train][~np.isnan(col[:n_train])]
        if observed.size == 0:
            observed = col[~np.isnan(col)]
        if observed.size == 0:
            raise SchemaError(f"channel {name!r} has no observed values")
        fill = observed.mean()
        for n in range(col.shape[1]):
            series = col[:, n]
            last = math.nan
            for t in range(series.shape[0]):
                if np.isnan(series[t]):
                    series[t] = last
                else:
                    last = series[t]
            series[np.isnan(series)] = fill
    return report


def write_csv(dataset: RawDataset, path, fmt: str = "{:.6f}") -> None:
    """Emit the CSV schema; only the on-disk channels are written."""
    idx = [dataset.channels.index(c) for c in CSV_CHANNELS]
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for t, ts in enumerate(dataset.timestamps):
            stamp = ts.astype(datetime).strftime(TIMESTAMP_FORMAT)
            for n, sid in enumerate(dataset.station_ids):
                vals = dataset.values[t, n, idx]
                fields_ = ("" if math.isnan(v) else fmt.format(v) for v in vals)
                fh.write(f"{stamp},{sid}," + ",".join(fields_) + "\n")


# -- calendar ---------------------------------------------------------------------


def calendar_features(timestamps) -> np.ndarray:
    """T x 4 daily and weekly phase encodings; Monday is day 0."""
    ts = np.asarray(timestamps, dtype="datetime64[h]")
    hours = ts.astype(np.int64)
    hour = hours % 24
    dow = (hours // 24 + 3) % 7  # 1970-01-01 was a Thursday
    day_phase = 2.0 * np.pi * hour / 24.0
    week_phase = 2.0 * np.pi * dow / 7.0
    return np.stack([np.sin(day_phase), np.cos(day_phase), np.sin(week_phase), np.cos(week_phase)], axis=1)


def with_calendar(dataset: RawDataset) -> RawDataset:
    """Append the four calendar channels, identical for every station."""
    if set(CALENDAR) <= set(dataset.channels):
        return dataset
    cal = calendar_features(dataset.timestamps)
    cal = np.broadcast_to(cal[:, None, :], (dataset.T, dataset.N, len(CALENDAR)))
    return replace(
        dataset,
        channels=dataset.channels + CALENDAR,
        values=np.concatenate([dataset.values, cal], axis=2),
    )


# -- splitting & normalisation -------------------------------------------------------


def split_points(T: int) -> tuple[int, int]:
    # integer arithmetic: 0.7 + 0.2 is not exactly 0.9 in binary floating point
    return T * 7 // 10, T * 9 // 10


def chronological_split(dataset: RawDataset, min_length: int | Sequence[int] = 1):
    """Contiguous 7:2:1 train/validation/test segments.

    ``min_length`` is either one minimum for every segment or a triple.
    """
    a, b = split_points(dataset.T)
    parts = (dataset.slice_time(0, a), dataset.slice_time(a, b), dataset.slice_time(b, dataset.T))
    mins = (min_length,) * 3 if isinstance(min_length, int) else tuple(min_length)
    for name, part, m in zip(("train", "validation", "test"), parts, mins):
        if part.T < m:
            raise TooShort(f"{name} split has {part.T} hours, need at least {m}")
    return parts


@dataclass
class Normalizer:
    channels: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def apply(self, dataset: RawDataset) -> RawDataset:
        if dataset.channels != self.channels:
            raise SchemaError(f"normalizer fitted on {self.channels}, dataset has {dataset.channels}")
        return replace(dataset, values=(dataset.values - self.mean) / self.std)

    def invert_target(self, values) -> np.ndarray:
        i = self.channels.index(TARGET)
        return np.asarray(values) * self.std[i] + self.mean[i]

    @property
    def target_std(self) -> float:
        return float(self.std[self.channels.index(TARGET)])


def fit_normalizer(train: RawDataset) -> Normalizer:
    flat = train.values.reshape(-1, len(train.channels))
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    for c, s, m in zip(train.channels, std, mean):
        if not s > 1e-12 * max(1.0, abs(m)):
            raise ConstantChannel(f"channel {c!r} is constant on the training split")
    return Normalizer(train.channels, mean, std)


def apply(normalizer: Normalizer, dataset: RawDataset) -> RawDataset:
    return normalizer.apply(dataset)


def invert_target(normalizer: Normalizer, values) -> np.ndarray:
    return normalizer.invert_target(values)


# -- windows ------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowSample:
    X_p: np.ndarray  # N x W
    U_p: np.ndarray  # N x W x P
    U_f: np.ndarray  # N x H x F
    X_f: np.ndarray  # N x H
    t0_index: int
    delta: int


def window_count(L: int, W: int, H: int, delta: int) -> int:
    return max(0, L - W - delta - H + 1)


def make_windows(split: RawDataset, spec: CovariateSpec, W: int, H: int, delta: int = 0) -> list[WindowSample]:
    """Stride-1 windows: history [t0-W+1, t0], horizon [t0+delta+1, t0+delta+H]."""
    L = split.T
    if W < 1 or H < 1 or delta < 0:
        raise ValueError(f"need W, H >= 1 and delta >= 0, got {W}, {H}, {delta}")
    if L < W + delta + H:
        raise TooShort(f"split of {L} hours cannot hold W + delta + H = {W + delta + H}")
    target = split.channel(TARGET).T  # N x L
    past = split.values[:, :, [split.channels.index(c) for c in spec.past_channels]].transpose(1, 0, 2)
    future = split.values[:, :, [split.channels.index(c) for c in spec.future_channels]].transpose(1, 0, 2)
    out = []
    for t0 in range(W - 1, L - delta - H):
        h0 = t0 + delta + 1
        out.append(
            WindowSample(
                X_p=target[:, t0 - W + 1: t0 + 1],
                U_p=past[:, t0 - W + 1: t0 + 1],
                U_f=future[:, h0: h0 + H],
                X_f=target[:, h0: h0 + H],
                t0_index=t0,
                delta=delta,
            )
        )
    return out


@dataclass(frozen=True)
class WindowBatch:
    X_p: np.ndarray
    U_p: np.ndarray
    U_f: np.ndarray
    X_f: np.ndarray

    def __len__(self) -> int:
        return self.X_p.shape[0]

    def subset(self, idx) -> WindowBatch:
        return WindowBatch(self.X_p[idx], self.U_p[idx], self.U_f[idx], self.X_f[idx])


def stack_windows(samples: Sequence[WindowSample]) -> WindowBatch:
    if not samples:
        raise EmptyDataset("no windows to stack")
    return WindowBatch(
        np.stack([s.X_p for s in samples]),
        np.stack([s.U_p for s in samples]),
        np.stack([s.U_f for s in samples]),
        np.stack([s.X_f for s in samples]),
    )
