"""Regular-grid demand time series: containers, ingestion, resampling, sums.

A fleet is held as one ``(N, T)`` float64 matrix with rows in ascending
customer-id order. Every fleet-level reduction walks the rows in that order,
so sums are reproducible bit for bit.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from gridfee.errors import (
    EmptyFleet,
    EmptyGroup,
    GridMismatch,
    IrregularGrid,
    LengthMismatch,
    MissingColumn,
    NonFiniteValue,
    NonMultipleInterval,
)

UTC = timezone.utc
CSV_COLUMNS = ("timestamp", "customer_id", "kw")

# bytes per row-chunk in fleet-wide passes
CHUNK_BYTES = 64 * 2**20


def _as_utc(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        return ts.replace(tzinfo=UTC)
    return ts.astimezone(UTC)


def parse_timestamp(text: str | datetime) -> datetime:
    if isinstance(text, datetime):
        return _as_utc(text)
    return _as_utc(datetime.fromisoformat(text.replace("Z", "+00:00")))


def format_timestamp(ts: datetime) -> str:
    return _as_utc(ts).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True, slots=True)
class TimeGrid:
    """``count`` samples starting at ``start`` (UTC), ``interval_s`` seconds apart."""

    start: datetime
    interval_s: int
    count: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "start", _as_utc(self.start))
        if int(self.interval_s) != self.interval_s or self.interval_s <= 0:
            raise IrregularGrid(f"interval must be a positive whole number of seconds, got {self.interval_s}")
        object.__setattr__(self, "interval_s", int(self.interval_s))
        if 3600 % self.interval_s:
            raise IrregularGrid(f"interval {self.interval_s}s does not divide one hour")
        if self.count < 1:
            raise IrregularGrid("a grid needs at least one sample")

    @property
    def interval_hours(self) -> float:
        return self.interval_s / 3600.0

    @property
    def end(self) -> datetime:
        """Exclusive end of the last interval."""
        return self.start + timedelta(seconds=self.interval_s * self.count)

    def timestamps(self) -> np.ndarray:
        start = np.datetime64(self.start.replace(tzinfo=None), "s")
        return start + np.arange(self.count, dtype=np.int64) * np.timedelta64(self.interval_s, "s")

    def seconds_of_day(self, utc_offset_hours: float = 0.0) -> np.ndarray:
        """Local wall-clock second-of-day at the start of every slot."""
        return self._local_seconds(utc_offset_hours) % 86400

    def local_day(self, utc_offset_hours: float = 0.0) -> np.ndarray:
        """Local day number of every slot, counted from 1970-01-01."""
        return self._local_seconds(utc_offset_hours) // 86400

    def _local_seconds(self, utc_offset_hours: float) -> np.ndarray:
        epoch = int(self.start.timestamp()) + int(round(utc_offset_hours * 3600))
        return epoch + np.arange(self.count, dtype=np.int64) * self.interval_s

    def slice(self, lo: int, hi: int) -> TimeGrid:
        lo, hi, _ = slice(lo, hi).indices(self.count)
        if hi <= lo:
            raise IrregularGrid("empty grid slice")
        return TimeGrid(self.start + timedelta(seconds=lo * self.interval_s), self.interval_s, hi - lo)

    def index_range(self, start: datetime | None = None, end: datetime | None = None) -> tuple[int, int]:
        """Indices ``[lo, hi)`` of slots whose start lies in ``[start, end)``."""
        lo, hi = 0, self.count
        if start is not None:
            offset = (_as_utc(start) - self.start).total_seconds()
            lo = min(max(0, int(np.ceil(offset / self.interval_s))), self.count)
        if end is not None:
            offset = (_as_utc(end) - self.start).total_seconds()
            hi = min(max(0, int(np.ceil(offset / self.interval_s))), self.count)
        return lo, max(lo, hi)

    def to_dict(self) -> dict:
        return {"start": format_timestamp(self.start), "interval_s": self.interval_s, "count": self.count}


def _checked_values(values, grid: TimeGrid, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != grid.count:
        raise LengthMismatch(f"{what}: expected {grid.count} values, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"{what}: series contains NaN or infinite values")
    arr = arr.view()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, slots=True)
class MeterSeries:
    """One customer's signed demand in kW. Negative values are net export."""

    customer_id: str
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "customer_id", str(self.customer_id))
        object.__setattr__(self, "values", _checked_values(self.values, self.grid, self.customer_id))

    @classmethod
    def _trusted(cls, customer_id: str, grid: TimeGrid, values: np.ndarray) -> MeterSeries:
        # rows of an already validated fleet
        obj = object.__new__(cls)
        object.__setattr__(obj, "customer_id", customer_id)
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "values", values)
        return obj

    def renamed(self, customer_id: str) -> MeterSeries:
        return MeterSeries._trusted(str(customer_id), self.grid, self.values)

    def energy_kwh(self) -> float:
        return float(self.values.sum() * self.grid.interval_hours)


@dataclass(frozen=True, slots=True)
class DiffSeries:
    customer_id: str
    grid: TimeGrid
    deltas: np.ndarray


@dataclass(frozen=True, slots=True)
class SystemSeries:
    """Total system demand ``demand`` and its step change ``variability``."""

    grid: TimeGrid
    demand: np.ndarray
    variability: np.ndarray


class Fleet:
    """A set of customers on one TimeGrid, stored as a read-only ``(N, T)`` matrix."""

    __slots__ = ("customer_ids", "grid", "values", "_index")

    def __init__(self, customer_ids: Sequence[str], grid: TimeGrid, values: np.ndarray, *, validate: bool = True):
        ids = tuple(str(c) for c in customer_ids)
        arr = np.asarray(values, dtype=np.float64)
        if validate:
            if not ids:
                raise EmptyFleet("fleet has no customers")
            if arr.ndim != 2 or arr.shape != (len(ids), grid.count):
                raise LengthMismatch(f"expected values of shape {(len(ids), grid.count)}, got {arr.shape}")
            if len(set(ids)) != len(ids):
                raise GridMismatch("duplicate customer ids in fleet")
            if list(ids) != sorted(ids):
                order = sorted(range(len(ids)), key=ids.__getitem__)
                ids = tuple(ids[i] for i in order)
                arr = arr[order]
            for lo, hi in row_chunks(arr.shape[0], arr.shape[1]):
                if not np.isfinite(arr[lo:hi]).all():
                    raise NonFiniteValue("fleet contains NaN or infinite values")
        arr = arr.view()
        arr.flags.writeable = False
        self.customer_ids = ids
        self.grid = grid
        self.values = arr
        self._index = {c: i for i, c in enumerate(ids)}

    @classmethod
    def from_series(cls, series: Iterable[MeterSeries]) -> Fleet:
        items = sorted(series, key=lambda s: s.customer_id)
        if not items:
            raise EmptyFleet("fleet has no customers")
        grid = items[0].grid
        for s in items[1:]:
            if s.grid != grid:
                raise GridMismatch(f"{s.customer_id} is on {s.grid}, expected {grid}")
        values = np.empty((len(items), grid.count))
        for i, s in enumerate(items):
            values[i] = s.values
        return cls([s.customer_id for s in items], grid, values, validate=True)

    def __len__(self) -> int:
        return len(self.customer_ids)

    def __iter__(self) -> Iterator[MeterSeries]:
        for i, c in enumerate(self.customer_ids):
            yield MeterSeries._trusted(c, self.grid, self.values[i])

    def __contains__(self, customer_id: object) -> bool:
        return customer_id in self._index

    def __getitem__(self, customer_id: str) -> MeterSeries:
        i = self._index[customer_id]
        return MeterSeries._trusted(customer_id, self.grid, self.values[i])

    def index(self, customer_id: str) -> int:
        return self._index[customer_id]

    def subset(self, customer_ids: Iterable[str]) -> Fleet:
        ids = sorted(set(customer_ids))
        rows = [self._index[c] for c in ids]
        return Fleet(ids, self.grid, self.values[rows], validate=False)

    def window(self, start: datetime | None = None, end: datetime | None = None) -> Fleet:
        """Slots whose start lies in ``[start, end)``."""
        lo, hi = self.grid.index_range(start, end)
        if (lo, hi) == (0, self.grid.count):
            return self
        return Fleet(self.customer_ids, self.grid.slice(lo, hi), self.values[:, lo:hi], validate=False)

    def __repr__(self) -> str:
        return f"Fleet(n={len(self)}, grid={self.grid})"


def as_fleet(fleet: Fleet | Iterable[MeterSeries]) -> Fleet:
    if isinstance(fleet, Fleet):
        return fleet
    return Fleet.from_series(fleet)


def row_chunks(n_rows: int, n_cols: int, chunk_bytes: int = CHUNK_BYTES) -> Iterator[tuple[int, int]]:
    step = max(1, chunk_bytes // max(1, 8 * n_cols))
    for lo in range(0, n_rows, step):
        yield lo, min(n_rows, lo + step)


def _require_same_grid(grid: TimeGrid, other: TimeGrid, what: str) -> None:
    if grid != other:
        raise GridMismatch(f"{what}: grid {other} does not match {grid}")


# ---------------------------------------------------------------- operations


def resample(series: MeterSeries, target_interval: int) -> MeterSeries:
    """Average whole windows of ``target_interval`` seconds; a trailing partial window is dropped."""
    fleet = resample_fleet(Fleet([series.customer_id], series.grid, series.values[None, :], validate=False), target_interval)
    return MeterSeries._trusted(series.customer_id, fleet.grid, fleet.values[0])


def resample_values(values: np.ndarray, interval_s: int, target_interval: int) -> np.ndarray:
    target_interval = int(target_interval)
    if target_interval <= 0 or target_interval % interval_s:
        raise NonMultipleInterval(f"{target_interval}s is not a multiple of {interval_s}s")
    factor = target_interval // interval_s
    if factor == 1:
        return values
    n = values.shape[-1] // factor
    if n == 0:
        raise NonMultipleInterval(f"series is shorter than one {target_interval}s window")
    trimmed = values[..., : n * factor]
    return trimmed.reshape(values.shape[:-1] + (n, factor)).mean(axis=-1)


def resample_fleet(fleet: Fleet, target_interval: int) -> Fleet:
    values = resample_values(fleet.values, fleet.grid.interval_s, target_interval)
    if values is fleet.values:
        return fleet
    grid = TimeGrid(fleet.grid.start, int(target_interval), values.shape[1])
    return Fleet(fleet.customer_ids, grid, values, validate=False)


def diff_values(values: np.ndarray) -> np.ndarray:
    """Step changes along the last axis; the first step is 0 by convention."""
    return np.diff(values, axis=-1, prepend=values[..., :1])


def diff(series: MeterSeries) -> DiffSeries:
    deltas = diff_values(series.values)
    deltas.flags.writeable = False
    return DiffSeries(series.customer_id, series.grid, deltas)


def _ordered_sum(values: np.ndarray) -> np.ndarray:
    # row-by-row accumulation in storage (customer-id) order
    total = values[0].copy()
    for row in values[1:]:
        total += row
    return total


def aggregate_system(fleet: Fleet | Iterable[MeterSeries]) -> SystemSeries:
    fleet = as_fleet(fleet)
    demand = _ordered_sum(fleet.values)
    variability = diff_values(demand)
    demand.flags.writeable = False
    variability.flags.writeable = False
    return SystemSeries(fleet.grid, demand, variability)


def sum_series(group: Iterable[MeterSeries], new_id: str) -> MeterSeries:
    items = sorted(group, key=lambda s: s.customer_id)
    if not items:
        raise EmptyGroup("cannot sum an empty group")
    grid = items[0].grid
    for s in items[1:]:
        _require_same_grid(grid, s.grid, s.customer_id)
    total = items[0].values.copy()
    for s in items[1:]:
        total += s.values
    total.flags.writeable = False
    return MeterSeries._trusted(str(new_id), grid, total)


# ---------------------------------------------------------------- I/O


def load_meter_csv(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    *,
    interval_s: int | None = None,
) -> Fleet:
    """Read ``timestamp,customer_id,kw`` rows into a Fleet.

    ``schema`` maps the logical names ``timestamp``, ``customer_id`` and
    ``kw`` to the column names used in the file. Rows may come in any order.
    Every customer must cover the same regular grid; gaps and duplicates are
    rejected rather than imputed.
    """
    cols = {name: name for name in CSV_COLUMNS}
    if schema:
        cols.update(schema)
    header = pd.read_csv(path, nrows=0).columns
    missing = [cols[name] for name in CSV_COLUMNS if cols[name] not in header]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")

    df = pd.read_csv(
        path,
        usecols=[cols[n] for n in CSV_COLUMNS],
        dtype={cols["customer_id"]: str, cols["timestamp"]: str},
        float_precision="round_trip",
        keep_default_na=False,
        na_values=[""],
    )
    if df.empty:
        raise EmptyFleet(f"{path}: no rows")
    kw = pd.to_numeric(df[cols["kw"]], errors="coerce").to_numpy(dtype=np.float64)
    if not np.isfinite(kw).all():
        bad = int(np.flatnonzero(~np.isfinite(kw))[0])
        raise NonFiniteValue(f"{path}: non-finite kw value in data row {bad + 1}")
    try:
        stamps = pd.to_datetime(df[cols["timestamp"]], utc=True, format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise IrregularGrid(f"{path}: unparseable timestamp ({exc})") from exc
    seconds = stamps.dt.tz_convert(None).to_numpy().astype("datetime64[s]").astype(np.int64)
    ids = df[cols["customer_id"]].to_numpy(dtype=str)

    order = np.lexsort((seconds, ids))
    ids, seconds, kw = ids[order], seconds[order], kw[order]
    uniq, first, counts = np.unique(ids, return_index=True, return_counts=True)

    steps = np.diff(seconds)
    same_customer = ids[1:] == ids[:-1]
    inner = steps[same_customer]
    if (inner == 0).any():
        raise IrregularGrid(f"{path}: duplicate timestamp for customer {ids[1:][same_customer][inner == 0][0]}")
    if interval_s is None:
        if inner.size == 0:
            raise IrregularGrid(f"{path}: cannot infer the interval from single-sample series")
        interval_s = int(inner.min())
    bad = inner != interval_s
    if bad.any():
        who = ids[1:][same_customer][bad][0]
        raise IrregularGrid(f"{path}: customer {who} has a gap or non-uniform step (expected {interval_s}s)")

    starts = seconds[first]
    if (counts != counts[0]).any() or (starts != starts[0]).any():
        raise GridMismatch(f"{path}: customers do not share one time grid")
    grid = TimeGrid(datetime.fromtimestamp(int(starts[0]), UTC), interval_s, int(counts[0]))
    values = kw.reshape(len(uniq), grid.count)
    return Fleet([str(u) for u in uniq], grid, values)


def write_meter_csv(fleet: Fleet | Iterable[MeterSeries], path: str | Path) -> None:
    fleet = as_fleet(fleet)
    n, t = fleet.values.shape
    stamps = np.char.add(np.datetime_as_string(fleet.grid.timestamps(), unit="s"), "Z")
    df = pd.DataFrame(
        {
            "timestamp": np.tile(stamps, n),
            "customer_id": np.repeat(np.asarray(fleet.customer_ids, dtype=object), t),
            "kw": fleet.values.reshape(-1),
        }
    )
    df.to_csv(path, index=False, lineterminator="\n")


def save_fleet(fleet: Fleet, path: str | Path) -> None:
    """Canonical binary store: one ``.npz`` per fleet, float64 values."""
    with open(path, "wb") as fh:
        np.savez(
            fh,
            values=np.ascontiguousarray(fleet.values),
            customer_ids=np.asarray(fleet.customer_ids, dtype=str),
            start=np.asarray(format_timestamp(fleet.grid.start)),
            interval_s=np.asarray(fleet.grid.interval_s, dtype=np.int64),
        )


def load_fleet(path: str | Path) -> Fleet:
    with np.load(path, allow_pickle=False) as data:
        values = data["values"]
        grid = TimeGrid(parse_timestamp(str(data["start"])), int(data["interval_s"]), values.shape[1])
        return Fleet([str(c) for c in data["customer_ids"]], grid, values)


def read_fleet(path: str | Path) -> Fleet:
    path = Path(path)
    if path.suffix == ".npz":
        return load_fleet(path)
    return load_meter_csv(path)
