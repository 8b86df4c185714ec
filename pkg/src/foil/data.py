"""Series ingestion, normalization, chronological splits and windowing."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class RawSeries:
    values: np.ndarray  # (T, d_in)
    target: int
    columns: Tuple[str, ...]
    timestamps: Optional[Tuple[str, ...]] = None
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError(f"series values must be 2-D, got shape {self.values.shape}")
        if not 0 <= self.target < self.values.shape[1]:
            raise DataError(f"target index {self.target} out of range for {self.values.shape[1]} columns")
        if len(self.columns) != self.values.shape[1]:
            raise DataError("column names do not match the number of columns")
        if not np.all(np.isfinite(self.values)):
            raise DataError("series contains missing or non-finite values")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def normalized(self) -> bool:
        return self.mean is not None

    def denormalize_target(self, y: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return np.asarray(y)
        return np.asarray(y) * self.std[self.target] + self.mean[self.target]


@dataclass(frozen=True)
class WindowSample:
    X: np.ndarray  # (l, d_in)
    Y: np.ndarray  # (h,)
    t: int  # 0-based index of the last lookback row


@dataclass(frozen=True)
class SplitSpec:
    """Half-open row boundaries ``[0, train_end)``, ``[train_end, val_end)``, ``[val_end, end)``."""

    train_end: int
    val_end: int
    end: int

    def __post_init__(self):
        if not 0 < self.train_end <= self.val_end <= self.end:
            raise ConfigError(f"invalid split boundaries {self.train_end}, {self.val_end}, {self.end}")

    @classmethod
    def from_fractions(cls, length: int, fractions: Sequence[float]) -> "SplitSpec":
        if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
        train_end = int(round(length * fractions[0]))
        val_end = int(round(length * (fractions[0] + fractions[1])))
        return cls(train_end, val_end, length)

    @classmethod
    def parse(cls, text: str, length: int) -> "SplitSpec":
        """Accepts ``"0.7:0.1:0.2"``."""
        try:
            fractions = [float(p) for p in text.split(":")]
        except ValueError:
            raise ConfigError(f"cannot parse split {text!r}; expected e.g. 0.7:0.1:0.2") from None
        return cls.from_fractions(length, fractions)

    def bounds(self, name: str) -> Tuple[int, int]:
        return {
            "train": (0, self.train_end),
            "val": (self.train_end, self.val_end),
            "test": (self.val_end, self.end),
            "all": (0, self.end),
        }[name]


def load_csv(path, target: Optional[str] = None, has_header: bool = True) -> RawSeries:
    """Read a numeric CSV. A leading ``date``/``timestamp`` column is passed through.

    ``target`` names the forecast column; ``None`` selects the last one.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    if has_header:
        header, body, first_line = rows[0], rows[1:], 2
    else:
        header = [f"c{i}" for i in range(len(rows[0]))]
        body, first_line = rows, 1
    stamp_col = None
    if header and header[0].strip().lower() in ("date", "timestamp", "time"):
        stamp_col = 0
    names = [h.strip() for i, h in enumerate(header) if i != stamp_col]
    if target is None:
        target = names[-1]
    if target not in names:
        raise DataError(f"{path}: target column {target!r} not found in {names}")
    values = np.empty((len(body), len(names)))
    stamps = []
    for r, row in enumerate(body):
        lineno = first_line + r
        if len(row) != len(header):
            raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
        cells = [c for i, c in enumerate(row) if i != stamp_col]
        if stamp_col is not None:
            stamps.append(row[stamp_col])
        for c, cell in enumerate(cells):
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: row {lineno}, column {names[c]!r}: cannot parse {cell!r} as a number"
                ) from None
            if not np.isfinite(values[r, c]):
                raise DataError(f"{path}: row {lineno}, column {names[c]!r}: missing value")
    return RawSeries(
        values,
        names.index(target),
        tuple(names),
        tuple(stamps) if stamp_col is not None else None,
    )


def write_csv(series: RawSeries, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["date"] if series.timestamps else []) + list(series.columns))
        for i, row in enumerate(series.values):
            stamp = [series.timestamps[i]] if series.timestamps else []
            w.writerow(stamp + [repr(float(v)) for v in row])


def fit_stats(values: np.ndarray, split: SplitSpec) -> Tuple[np.ndarray, np.ndarray]:
    train = values[: split.train_end]
    if len(train) == 0:
        raise DataError("train split is empty")
    return train.mean(axis=0), np.maximum(train.std(axis=0), SIGMA_FLOOR)


def zero_mean_normalize(series: RawSeries, split: SplitSpec) -> RawSeries:
    """Standardize every column with train-split mean and population std."""
    mean, std = fit_stats(series.values, split)
    return apply_normalization(series, mean, std)


def apply_normalization(series: RawSeries, mean: np.ndarray, std: np.ndarray) -> RawSeries:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (series.n_features,) or std.shape != (series.n_features,):
        raise DataError("normalization statistics do not match the series width")
    return replace(series, values=(series.values - mean) / std, mean=mean, std=std)


def window_anchors(
    length: int, lookback: int, horizon: int, bounds: Tuple[int, int], reach_back: bool = True
) -> np.ndarray:
    """Anchor indices t whose labels t+1..t+h lie inside ``bounds``.

    With ``reach_back`` the lookback rows may precede the split start.
    """
    if lookback < 1 or horizon < 1:
        raise ConfigError(f"lookback and horizon must be >= 1, got {lookback}, {horizon}")
    start, stop = bounds
    stop = min(stop, length)
    lo = max(start - 1, lookback - 1) if reach_back else start + lookback - 1
    hi = stop - horizon - 1
    if hi < lo:
        return np.empty(0, dtype=np.int64)
    return np.arange(lo, hi + 1, dtype=np.int64)


@dataclass(frozen=True)
class WindowArrays:
    """Stacked windows: the batched form of a list of :class:`WindowSample`."""

    X: np.ndarray  # (n, l, d_in)
    Y: np.ndarray  # (n, h)
    t: np.ndarray  # (n,)

    def __len__(self):
        return len(self.t)

    def subset(self, idx) -> "WindowArrays":
        return WindowArrays(self.X[idx], self.Y[idx], self.t[idx])

    def samples(self) -> List[WindowSample]:
        return [WindowSample(self.X[i], self.Y[i], int(self.t[i])) for i in range(len(self))]

    @classmethod
    def from_samples(cls, samples: Sequence[WindowSample]) -> "WindowArrays":
        if not samples:
            raise DataError("no samples")
        return cls(
            np.stack([s.X for s in samples]),
            np.stack([s.Y for s in samples]),
            np.array([s.t for s in samples], dtype=np.int64),
        )


def window_arrays(
    series: RawSeries,
    lookback: int,
    horizon: int,
    split: Optional[SplitSpec] = None,
    part: str = "all",
    reach_back: bool = True,
) -> WindowArrays:
    bounds = split.bounds(part) if split is not None else (0, series.length)
    anchors = window_anchors(series.length, lookback, horizon, bounds, reach_back)
    if len(anchors) == 0:
        log.warning("split %r too short for lookback=%d horizon=%d", part, lookback, horizon)
        d = series.n_features
        return WindowArrays(np.empty((0, lookback, d)), np.empty((0, horizon)), anchors)
    x_idx = anchors[:, None] + np.arange(-lookback + 1, 1)[None, :]
    y_idx = anchors[:, None] + np.arange(1, horizon + 1)[None, :]
    return WindowArrays(series.values[x_idx], series.values[y_idx, series.target], anchors)


def make_windows(series, lookback, horizon, split=None, part="all", reach_back=True) -> List[WindowSample]:
    """One :class:`WindowSample` per valid anchor, in time order."""
    return window_arrays(series, lookback, horizon, split, part, reach_back).samples()


def dump_windows_jsonl(windows: WindowArrays, path) -> None:
    """Debug dump: one ``{"t", "X", "Y"}`` record per line."""
    with Path(path).open("w") as fh:
        for i in range(len(windows)):
            rec = {"t": int(windows.t[i]), "X": windows.X[i].tolist(), "Y": windows.Y[i].tolist()}
            fh.write(json.dumps(rec) + "\n")


def revin_normalize(X: np.ndarray):
    """Per-window, per-feature standardization.

    ``X`` is one window ``(l, d)`` or a batch ``(n, l, d)``. Returns the
    normalized windows and ``(mean, std)`` with shapes ``(..., 1, d)``.
    """
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=-2, keepdims=True)
    std = np.maximum(X.std(axis=-2, keepdims=True), SIGMA_FLOOR)
    return (X - mean) / std, (mean, std)


def revin_denormalize(Y_norm: np.ndarray, stats, target: int) -> np.ndarray:
    """Map horizon outputs back using the target feature's window statistics."""
    mean, std = stats
    mu, sd = mean[..., 0, target], std[..., 0, target]
    Y = np.asarray(Y_norm, dtype=np.float64)
    if Y.ndim > 1:
        mu, sd = mu[..., None], sd[..., None]
    return Y * sd + mu
