"""Series ingestion, chronological splits, windowing, normalization, patching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, InsufficientDataError, ParseError

SPLITS = ("train", "val", "test")
TIMESTAMP_NAMES = {"date", "time", "timestamp", "datetime", "t"}
SEASONAL_PERIODS = {
    "yearly": 1,
    "quarterly": 4,
    "monthly": 12,
    "weekly": 1,
    "daily": 1,
    "hourly": 24,
    "15min": 96,
    "10min": 144,
}


def seasonal_period(frequency: str) -> int:
    """Season length for a frequency label; ``"period=N"`` spells it out."""
    label = frequency.lower()
    if label.startswith("period="):
        return int(label.split("=", 1)[1])
    return SEASONAL_PERIODS.get(label, 1)


@dataclass(frozen=True)
class SeriesDataset:
    """Multivariate series, ``values`` is ``[T_total, N_vars]``.

    ``boundaries`` is ``(train_end, val_end)`` once :func:`chronological_split`
    has run; rows ``[0, train_end)`` train, ``[train_end, val_end)`` validate,
    ``[val_end, T_total)`` test.
    """

    name: str
    values: np.ndarray
    frequency: str = "unknown"
    boundaries: tuple[int, int] | None = None
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] == 0:
            raise DataError(f"dataset {self.name!r} needs a non-empty [T, N] array, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.boundaries is not None:
            train_end, val_end = self.boundaries
            if not 0 < train_end <= val_end <= self.length:
                raise DataError(f"invalid split boundaries {self.boundaries} for {self.length} rows")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def num_vars(self) -> int:
        return self.values.shape[1]

    def split_range(self, split: str) -> tuple[int, int]:
        if self.boundaries is None:
            raise DataError(f"dataset {self.name!r} has not been split")
        train_end, val_end = self.boundaries
        return {"train": (0, train_end), "val": (train_end, val_end), "test": (val_end, self.length)}[split]

    def split(self, split: str) -> np.ndarray:
        start, end = self.split_range(split)
        return self.values[start:end]


@dataclass(frozen=True)
class Series:
    """One channel of a dataset (or of one split of it)."""

    values: np.ndarray
    channel: int = 0
    offset: int = 0  # row index of values[0] in the source dataset


@dataclass(frozen=True)
class NormRecord:
    mean: float
    std: float
    degenerate: bool = False


@dataclass(frozen=True)
class Window:
    history: np.ndarray
    target: np.ndarray
    channel: int = 0
    start: int = 0
    record: NormRecord | None = None
    normalized: bool = False

    @property
    def degenerate(self) -> bool:
        return self.record is not None and self.record.degenerate

    @property
    def end(self) -> int:
        return self.start + len(self.history) + len(self.target)


def _parse_float(cell: str) -> float | None:
    try:
        return float(cell)
    except ValueError:
        return None


def load_csv(path, name: str | None = None, frequency: str = "unknown") -> SeriesDataset:
    """Read a comma-separated numeric table.

    A first row containing any non-numeric cell is a header. A leading
    column is treated as a timestamp and dropped when its cells are
    non-numeric or its header is one of :data:`TIMESTAMP_NAMES`. Any other
    non-numeric cell is a :class:`ParseError` carrying its 1-based row and
    column.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header: list[str] = []
    first_data = 0
    if any(_parse_float(c) is None for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        first_data = 1
    data_rows = rows[first_data:]
    if not data_rows:
        raise DataError(f"{path}: no data rows")
    drop_first = _parse_float(data_rows[0][0]) is None or (bool(header) and header[0].lower() in TIMESTAMP_NAMES)
    width = len(data_rows[0])
    values = []
    for r, row in enumerate(data_rows, start=first_data + 1):
        if len(row) != width:
            raise ParseError(f"{path}: row {r} has {len(row)} cells, expected {width}", row=r)
        cells = row[1:] if drop_first else row
        parsed = []
        for c, cell in enumerate(cells, start=2 if drop_first else 1):
            v = _parse_float(cell)
            if v is None:
                raise ParseError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}", row=r, column=c)
            parsed.append(v)
        values.append(parsed)
    if not values[0]:
        raise DataError(f"{path}: no numeric columns")
    columns = tuple(header[1:] if drop_first else header) if header else ()
    return SeriesDataset(name or path.stem, np.array(values), frequency, columns=columns)


def load_m4_style(path, frequency: str = "unknown") -> list[SeriesDataset]:
    """One series per line: ``id,v1,v2,...``. Empty trailing cells are ignored."""
    out = []
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh), start=1):
            cells = [c.strip() for c in row]
            if not cells or not cells[0]:
                continue
            series_id, raw = cells[0], [c for c in cells[1:] if c]
            vals = []
            for c, cell in enumerate(raw, start=2):
                v = _parse_float(cell)
                if v is None:
                    if r == 1:
                        break  # header line
                    raise ParseError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}", row=r, column=c)
                vals.append(v)
            else:
                if vals:
                    out.append(SeriesDataset(series_id, np.array(vals), frequency))
    if not out:
        raise DataError(f"{path}: no series found")
    return out


def chronological_split(
    ds: SeriesDataset,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    min_length: int = 1,
) -> SeriesDataset:
    """Split boundaries at ``floor(T*train)`` and ``floor(T*(train+val))``.

    ``min_length`` is normally ``T_h + T_f``; every split must hold at least
    that many rows so windows never straddle a boundary.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three positive numbers summing to 1, got {tuple(ratios)}")
    T = ds.length
    # the 1e-9 guard keeps exact ratios like 8545/14307 from flooring one row short
    train_end = int(math.floor(T * ratios[0] + 1e-9))
    val_end = int(math.floor(T * (ratios[0] + ratios[1]) + 1e-9))
    sizes = (train_end, val_end - train_end, T - val_end)
    if min(sizes) < max(min_length, 1):
        raise InsufficientDataError(
            f"dataset {ds.name!r} with {T} rows splits into {sizes}; each split needs >= {min_length} rows"
        )
    return replace(ds, boundaries=(train_end, val_end))


def channel_split(ds: SeriesDataset, split: str | None = None) -> list[Series]:
    """One univariate :class:`Series` per column, in column order."""
    if split is None:
        start, block = 0, ds.values
    else:
        start, _ = ds.split_range(split)
        block = ds.split(split)
    return [Series(np.ascontiguousarray(block[:, j]), channel=j, offset=start) for j in range(ds.num_vars)]


def window_count(length: int, T_h: int, T_f: int, stride: int) -> int:
    span = length - T_h - T_f
    return span // stride + 1 if span >= 0 else 0


def norm_record(history: np.ndarray) -> NormRecord:
    """Population mean/std of the history; zero variance flags the window."""
    mu = float(np.mean(history))
    sd = float(np.std(history))
    if sd == 0.0:
        return NormRecord(mu, 1.0, degenerate=True)
    return NormRecord(mu, sd)


def make_windows(series: Series | np.ndarray, T_h: int, T_f: int, stride: int = 1) -> list[Window]:
    if T_h < 1 or T_f < 1 or stride < 1:
        raise DataError(f"T_h, T_f and stride must be >= 1, got {(T_h, T_f, stride)}")
    if not isinstance(series, Series):
        series = Series(np.asarray(series, dtype=np.float64))
    values = series.values
    windows = []
    for i in range(window_count(len(values), T_h, T_f, stride)):
        s = i * stride
        history = values[s : s + T_h]
        windows.append(
            Window(
                history=history,
                target=values[s + T_h : s + T_h + T_f],
                channel=series.channel,
                start=series.offset + s,
                record=norm_record(history),
            )
        )
    return windows


def split_windows(ds: SeriesDataset, split: str, T_h: int, T_f: int, stride: int = 1) -> list[Window]:
    """Windows of every channel lying entirely inside one split."""
    out = []
    for series in channel_split(ds, split):
        out.extend(make_windows(series, T_h, T_f, stride))
    return out


def normalize(window: Window) -> Window:
    """Standardize history and target with the history's statistics.

    A degenerate (constant) history is only centered.
    """
    if window.normalized:
        return window
    rec = window.record or norm_record(window.history)
    return replace(
        window,
        history=(window.history - rec.mean) / rec.std,
        target=(window.target - rec.mean) / rec.std,
        record=rec,
        normalized=True,
    )


def denormalize(values, record: NormRecord) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * record.std + record.mean


def patchify(series, P: int) -> np.ndarray:
    """``[T]`` -> ``[T/P, P]`` non-overlapping patches (or ``[..., T]`` -> ``[..., T/P, P]``)."""
    arr = np.asarray(series, dtype=np.float64)
    T = arr.shape[-1]
    if P < 1 or T % P:
        raise DimensionError(f"series length {T} is not divisible by patch length {P}")
    return arr.reshape(arr.shape[:-1] + (T // P, P))


def make_synthetic(
    length: int = 2000,
    num_vars: int = 3,
    seed: int = 0,
    period: int = 24,
    noise: float = 0.1,
    name: str = "synthetic",
) -> SeriesDataset:
    """Seeded sum of sinusoids + linear trend + Gaussian noise, kept positive.

    Each channel mixes the base period with its second harmonic and a slower
    cycle, with channel-specific amplitudes and phases.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    cols = []
    for _ in range(num_vars):
        amp = rng.uniform(0.5, 1.5, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        slow = period * rng.integers(5, 9)
        x = (
            amp[0] * np.sin(2 * np.pi * t / period + phase[0])
            + 0.5 * amp[1] * np.sin(4 * np.pi * t / period + phase[1])
            + amp[2] * np.sin(2 * np.pi * t / slow + phase[2])
            + rng.uniform(-1.0, 1.0) * t / length
            + noise * rng.standard_normal(length)
        )
        cols.append(x + 5.0)
    frequency = "hourly" if period == 24 else f"period={period}"
    return SeriesDataset(name, np.stack(cols, axis=1), frequency=frequency)


def save_csv(ds: SeriesDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ds.columns or tuple(f"v{j}" for j in range(ds.num_vars))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", *cols])
        for i, row in enumerate(ds.values):
            writer.writerow([i, *(repr(float(v)) for v in row)])
    return path
