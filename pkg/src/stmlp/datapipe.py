"""Raw series ingestion, calendar indices, z-score scaling, windowing and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterator

import numpy as np

STML_MAGIC = b"STML"
DAYS_PER_WEEK = 7


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    values: np.ndarray  # (T_total, N)
    start_timestamp: datetime
    interval_minutes: int = 5

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError(f"series must be 2-D (steps, nodes), got shape {self.values.shape}")
        if self.interval_minutes <= 0 or 1440 % self.interval_minutes:
            raise DataError(f"interval_minutes={self.interval_minutes} must divide 1440")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.interval_minutes


@dataclass
class Calendar:
    td: np.ndarray  # slot within the day, [0, K)
    dw: np.ndarray  # weekday, Monday = 0
    steps_per_day: int


@dataclass
class Normalizer:
    mean: float
    std: float

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, x):
        return x * self.std + self.mean


@dataclass
class WindowSet:
    """Windows of one split, stored as start indices into shared arrays.

    ``x`` comes from the normalized series, ``y`` from the raw one.
    """

    starts: np.ndarray
    normalized: np.ndarray
    raw: np.ndarray
    calendar: Calendar
    T: int
    Q: int

    def __len__(self) -> int:
        return len(self.starts)

    def gather(self, idx) -> "Batch":
        s = self.starts[np.asarray(idx, dtype=np.intp)]
        hist = s[:, None] + np.arange(self.T)[None, :]
        fut = s[:, None] + self.T + np.arange(self.Q)[None, :]
        return Batch(
            x=self.normalized[hist].transpose(0, 2, 1),
            td=self.calendar.td[hist],
            dw=self.calendar.dw[hist],
            y=self.raw[fut].transpose(0, 2, 1),
            x_raw=self.raw[hist].transpose(0, 2, 1),
        )


@dataclass
class Batch:
    x: np.ndarray       # (B, N, T) normalized history
    td: np.ndarray      # (B, T)
    dw: np.ndarray      # (B, T)
    y: np.ndarray       # (B, N, Q) raw target
    x_raw: np.ndarray   # (B, N, T) raw history

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class Splits:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    normalizer: Normalizer

    def items(self):
        return (("train", self.train), ("val", self.val), ("test", self.test))


# loading -------------------------------------------------------------------

def _parse_csv(path: Path, n_nodes: int | None) -> np.ndarray:
    rows = []
    width = n_nodes
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            try:
                row = [float(f) for f in fields]
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header
                raise DataError(f"{path}:{lineno}: cannot parse numeric row") from None
            if width is None:
                width = len(row)
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            if not all(np.isfinite(row)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def read_stml(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != STML_MAGIC:
        raise DataError(f"{path}: not an STML file")
    t_total, n = struct.unpack("<II", blob[4:12])
    payload = np.frombuffer(blob, dtype="<f8", offset=16)
    if payload.size != t_total * n:
        raise DataError(f"{path}: payload has {payload.size} values, header says {t_total}x{n}")
    return payload.reshape(t_total, n).astype(np.float64)


def write_stml(path: str | Path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    t_total, n = values.shape
    with open(path, "wb") as fh:
        # 16-byte header: magic, T_total, N, 4 reserved bytes
        fh.write(STML_MAGIC + struct.pack("<III", t_total, n, 0))
        fh.write(values.tobytes())


def load_values(path: str | Path, n_nodes: int | None = None) -> np.ndarray:
    """Read a ``(T_total, N)`` array from CSV, STML binary, .npy/.npz or PEMS .h5."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    suffix = path.suffix.lower()
    if suffix == ".csv" or suffix == ".txt":
        values = _parse_csv(path, n_nodes)
    elif suffix in (".bin", ".stml"):
        values = read_stml(path)
    elif suffix == ".npy":
        values = np.load(path)
    elif suffix == ".npz":
        with np.load(path) as z:
            values = z["data"] if "data" in z else z[z.files[0]]
    elif suffix in (".h5", ".hdf5"):
        values = _read_pandas_h5(path)
    else:
        raise DataError(f"{path}: unsupported data format {suffix!r}")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        # PEMS0x .npz ships (T, N, features); the first feature is flow
        values = values[..., 0]
    if values.ndim != 2 or values.shape[0] == 0:
        raise DataError(f"{path}: expected a non-empty (steps, nodes) array, got {values.shape}")
    if n_nodes is not None and values.shape[1] != n_nodes:
        raise DataError(f"{path}: expected {n_nodes} nodes, got {values.shape[1]}")
    if not np.all(np.isfinite(values)):
        bad = int(np.argwhere(~np.isfinite(values))[0, 0])
        raise DataError(f"{path}: non-finite value at row {bad + 1}")
    return values


def _read_pandas_h5(path: Path) -> np.ndarray:
    import h5py

    with h5py.File(path, "r") as f:
        group = f[next(iter(f.keys()))]
        return np.asarray(group["block0_values"])


def load_series(data_path, start_timestamp: str | datetime, interval_minutes: int = 5,
                n_nodes: int | None = None) -> RawSeries:
    if isinstance(start_timestamp, str):
        start_timestamp = datetime.fromisoformat(start_timestamp)
    return RawSeries(load_values(data_path, n_nodes), start_timestamp, interval_minutes)


# calendar ------------------------------------------------------------------

def build_calendar(series: RawSeries) -> Calendar:
    k = series.steps_per_day
    ts = series.start_timestamp
    minutes = ts.hour * 60 + ts.minute
    if minutes % series.interval_minutes or ts.second:
        raise DataError(f"start {ts.isoformat()} is not aligned to {series.interval_minutes}-minute slots")
    steps = np.arange(series.n_steps) + minutes // series.interval_minutes
    return Calendar(
        td=(steps % k).astype(np.int64),
        dw=((ts.weekday() + steps // k) % DAYS_PER_WEEK).astype(np.int64),
        steps_per_day=k,
    )


# normalization -------------------------------------------------------------

def fit_zscore(values: np.ndarray, train_fraction: float = 0.7) -> Normalizer:
    n_train = max(1, int(round(values.shape[0] * train_fraction)))
    train = values[:n_train]
    std = float(train.std())
    if not std > 0:
        raise DataError("training portion has zero variance; cannot z-score")
    return Normalizer(float(train.mean()), std)


def fit_apply_zscore(values: np.ndarray, train_fraction: float = 0.7) -> tuple[Normalizer, np.ndarray]:
    norm = fit_zscore(values, train_fraction)
    return norm, norm.apply(values)


# windowing -----------------------------------------------------------------

def split_counts(n_windows: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n_train = int(round(n_windows * fractions[0]))
    n_val = int(round(n_windows * fractions[1]))
    n_val = min(n_val, n_windows - n_train)
    return n_train, n_val, n_windows - n_train - n_val


def window_and_split(series: RawSeries, calendar: Calendar | None = None, T: int = 12, Q: int = 12,
                     fractions=(0.7, 0.1, 0.2), normalizer: Normalizer | None = None) -> Splits:
    """Stride-1 windows split chronologically by start index.

    The normalizer is fit on the same training fraction of raw steps unless
    one is supplied.
    """
    calendar = calendar or build_calendar(series)
    n_windows = series.n_steps - T - Q + 1
    if n_windows < 1:
        raise DataError(f"{series.n_steps} steps cannot hold one window of T={T}, Q={Q}")
    n_train, n_val, _ = split_counts(n_windows, fractions)
    normalizer = normalizer or fit_zscore(series.values, fractions[0])
    normalized = normalizer.apply(series.values)
    starts = np.arange(n_windows)
    parts = np.split(starts, [n_train, n_train + n_val])
    sets = [WindowSet(p, normalized, series.values, calendar, T, Q) for p in parts]
    return Splits(*sets, normalizer=normalizer)


def batch_iterator(samples: WindowSet, batch_size: int = 32, shuffle: bool = False,
                   seed: int = 0, epoch: int = 0) -> Iterator[Batch]:
    """Yield batches; shuffled order is derived from ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle:
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        rng.shuffle(order)
    for lo in range(0, len(order), batch_size):
        yield samples.gather(order[lo:lo + batch_size])
