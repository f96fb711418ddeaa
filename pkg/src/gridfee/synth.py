"""Seeded synthetic residential fleets: base load, EV charging and rooftop PV.

Every component of every home is drawn from its own RNG substream keyed on
``(seed, home_index, component)``, so a home is reproducible on its own and
homes can be generated in any order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from gridfee.errors import ConfigError, InvalidFractions
from gridfee.scenarios import HomeSpec, compose_fleet, compose_home
from gridfee.timeseries import (
    Fleet,
    MeterSeries,
    TimeGrid,
    format_timestamp,
    parse_timestamp,
    resample_values,
    save_fleet,
    write_meter_csv,
)

_BASE, _EV, _PV, _PV_CAPACITY = 0, 1, 2, 3

EVENING = "evening"
OFFPEAK = "offpeak"


@dataclass(frozen=True, slots=True)
class ProfileParams:
    # base load (kW, local hours)
    base_kw: float = 0.5
    morning_kw: float = 0.7
    morning_hour: float = 7.5
    evening_kw: float = 1.6
    evening_hour: float = 19.0
    scale_sigma: float = 0.3
    seasonal_amp: float = 0.25
    # multiplier on every stochastic component of the base load; 0 gives a smooth periodic profile
    noise_scale: float = 1.0
    noise_kw: float = 0.12
    noise_tau_min: float = 20.0
    appliance_events_per_day: float = 3.0
    appliance_kw: tuple[float, float] = (1.0, 3.0)
    appliance_minutes: tuple[float, float] = (5.0, 40.0)
    # EV charging
    ev_power_kw: float = 6.6
    ev_daily_prob: float = 0.7
    ev_session_hours: tuple[float, float] = (2.0, 4.0)
    ev_start_hour: float = 18.0
    ev_start_sd: float = 1.25
    ev_offpeak_window: tuple[float, float] = (0.0, 5.0)
    # PV
    pv_capacity_kw: tuple[float, float] = (2.5, 7.0)
    daylength_amp_h: float = 2.0
    day_class_p: tuple[float, float, float] = (0.45, 0.4, 0.15)  # clear, partly cloudy, overcast
    cloud_clear_minutes: float = 25.0
    cloud_shade_minutes: float = 10.0
    # isolated passing clouds on otherwise clear days
    clear_day_cloud_minutes: float = 150.0
    cloud_depth: tuple[float, float] = (0.1, 0.45)
    overcast_factor: tuple[float, float] = (0.15, 0.4)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, slots=True)
class FleetSpec:
    seed: int = 0
    n_homes: int = 200
    ev_fraction: float = 0.25
    pv_fraction: float = 0.25
    days: int = 731
    interval_s: int = 60
    start: datetime = datetime(2016, 1, 1, tzinfo=timezone.utc)
    utc_offset_hours: float = 0.0
    ev_mode: str = EVENING
    profile: ProfileParams = field(default_factory=ProfileParams)

    def __post_init__(self) -> None:
        object.__setattr__(self, "start", parse_timestamp(self.start))
        if self.n_homes < 1:
            raise ConfigError("a fleet needs at least one home")
        if self.days < 1:
            raise ConfigError("days must be >= 1")
        fr = (self.ev_fraction, self.pv_fraction)
        if any(not 0.0 <= f <= 1.0 for f in fr) or sum(fr) > 1.0 + 1e-12:
            raise InvalidFractions(f"EV and PV fractions must be non-negative and sum to at most 1, got {fr}")
        if self.ev_mode not in (EVENING, OFFPEAK):
            raise ConfigError(f"ev_mode must be {EVENING!r} or {OFFPEAK!r}")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.start, self.interval_s, self.days * 86400 // self.interval_s)

    @property
    def n_ev(self) -> int:
        return math.floor(self.n_homes * self.ev_fraction + 1e-9)

    @property
    def n_pv(self) -> int:
        return math.floor(self.n_homes * self.pv_fraction + 1e-9)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start"] = format_timestamp(self.start)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> FleetSpec:
        data = dict(data)
        profile = data.pop("profile", None) or {}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown fleet field(s): {sorted(unknown)}")
        bad = set(profile) - set(ProfileParams.__dataclass_fields__)
        if bad:
            raise ConfigError(f"unknown profile field(s): {sorted(bad)}")
        profile = {k: tuple(v) if isinstance(v, list) else v for k, v in profile.items()}
        return cls(**data, profile=ProfileParams(**profile))


def home_id(index: int) -> str:
    return f"home_{index:04d}"


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), stream])


@dataclass(frozen=True)
class _Clock:
    hours: np.ndarray  # local hour of day, float
    doy: np.ndarray  # day of year, 0-based
    day: np.ndarray  # local day index, 0 = first day touched by the grid
    n_days: int
    first_local_s: int  # local seconds (since epoch) of slot 0
    first_midnight_s: int


@lru_cache(maxsize=4)
def _clock(grid: TimeGrid, utc_offset_hours: float) -> _Clock:
    sod = grid.seconds_of_day(utc_offset_hours)
    day_abs = grid.local_day(utc_offset_hours)
    day = day_abs - day_abs[0]
    dates = np.datetime64("1970-01-01", "D") + np.arange(day_abs[0], day_abs[-1] + 1)
    doy_per_day = (dates - dates.astype("datetime64[Y]")).astype(np.int64)
    first_local = int(day_abs[0] * 86400 + sod[0])
    return _Clock(
        hours=sod / 3600.0,
        doy=doy_per_day[day].astype(np.float64),
        day=day,
        n_days=int(day[-1]) + 1,
        first_local_s=first_local,
        first_midnight_s=int(day_abs[0] * 86400),
    )


def _bump(hours: np.ndarray, centre: float, width: float) -> np.ndarray:
    d = (hours - centre + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (d / width) ** 2)


def _rectangles(count: int, starts: np.ndarray, stops: np.ndarray, heights: np.ndarray) -> np.ndarray:
    """Sum of rectangular pulses ``[start, stop)`` clipped to the grid."""
    starts = np.clip(starts, 0, count)
    stops = np.clip(stops, 0, count)
    edges = np.zeros(count + 1)
    np.add.at(edges, starts, heights)
    np.add.at(edges, stops, -heights)
    return np.cumsum(edges[:-1])


def _slot_of(clock: _Clock, local_s: np.ndarray, interval_s: int) -> np.ndarray:
    return np.round((local_s - clock.first_local_s) / interval_s).astype(np.int64)


def gen_base_profile(
    seed: int,
    home_index: int,
    grid: TimeGrid,
    params: ProfileParams = ProfileParams(),
    *,
    utc_offset_hours: float = 0.0,
) -> MeterSeries:
    """Non-negative household load with morning and evening humps.

    Household scale and hump timing vary per home; day-to-day level changes,
    AR(1) noise and short appliance events are scaled by ``noise_scale``.
    """
    rng = _rng(seed, home_index, _BASE)
    clock = _clock(grid, utc_offset_hours)
    scale = rng.lognormal(0.0, params.scale_sigma)
    morning_h = params.morning_hour + rng.normal(0.0, 0.5)
    evening_h = params.evening_hour + rng.normal(0.0, 0.6)
    morning = params.morning_kw * rng.uniform(0.6, 1.4)
    evening = params.evening_kw * rng.uniform(0.7, 1.3)

    level = params.base_kw + morning * _bump(clock.hours, morning_h, 1.1) + evening * _bump(clock.hours, evening_h, 1.7)
    level *= 1.0 + params.seasonal_amp * np.cos(2.0 * np.pi * (clock.doy - 200.0) / 365.25)
    level *= scale

    ns = params.noise_scale
    if ns > 0:
        level *= rng.lognormal(0.0, 0.15 * ns, size=clock.n_days)[clock.day]
        phi = math.exp(-grid.interval_s / (params.noise_tau_min * 60.0))
        sigma = params.noise_kw * scale * ns
        shocks = rng.normal(0.0, sigma * math.sqrt(1.0 - phi * phi), size=grid.count)
        shocks[0] = rng.normal(0.0, sigma)
        level += lfilter([1.0], [1.0, -phi], shocks)

        n_events = rng.poisson(params.appliance_events_per_day * clock.n_days)
        day = rng.integers(0, clock.n_days, size=n_events)
        evening_evt = rng.random(n_events) < 0.5
        hour = np.where(evening_evt, rng.normal(19.0, 2.0, n_events), rng.uniform(7.0, 23.0, n_events)) % 24.0
        minutes = rng.uniform(*params.appliance_minutes, size=n_events)
        kw = rng.uniform(*params.appliance_kw, size=n_events) * ns
        start = _slot_of(clock, clock.first_midnight_s + day * 86400 + hour * 3600.0, grid.interval_s)
        length = np.maximum(1, np.round(minutes * 60.0 / grid.interval_s).astype(np.int64))
        level += _rectangles(grid.count, start, start + length, kw)

    return MeterSeries(home_id(home_index), grid, np.maximum(level, 0.0))


def gen_ev_overlay(
    seed: int,
    home_index: int,
    grid: TimeGrid,
    power_kw: float | None = None,
    *,
    mode: str = EVENING,
    params: ProfileParams = ProfileParams(),
    utc_offset_hours: float = 0.0,
) -> MeterSeries:
    """Rectangular charging sessions at ``power_kw`` (default 6.6 kW).

    ``evening`` mode starts sessions around ``ev_start_hour``; ``offpeak``
    confines each session to ``ev_offpeak_window``.
    """
    power = params.ev_power_kw if power_kw is None else power_kw
    rng = _rng(seed, home_index, _EV)
    clock = _clock(grid, utc_offset_hours)
    n = clock.n_days
    active = rng.random(n) < params.ev_daily_prob
    hours = rng.uniform(*params.ev_session_hours, size=n)
    if mode == EVENING:
        start_h = np.clip(rng.normal(params.ev_start_hour, params.ev_start_sd, n), 15.0, 23.0)
    elif mode == OFFPEAK:
        lo, hi = params.ev_offpeak_window
        if hi - lo < params.ev_session_hours[1]:
            raise ConfigError("off-peak window is shorter than the longest session")
        start_h = lo + rng.random(n) * (hi - lo - hours)
    else:
        raise ConfigError(f"unknown EV mode {mode!r}")
    days = np.flatnonzero(active)
    start = _slot_of(clock, clock.first_midnight_s + days * 86400 + start_h[days] * 3600.0, grid.interval_s)
    length = np.round(hours[days] * 3600.0 / grid.interval_s).astype(np.int64)
    on = _rectangles(grid.count, start, start + length, np.ones(days.size)) > 0.5
    return MeterSeries(home_id(home_index), grid, np.where(on, float(power), 0.0))


def _alternating_runs(rng: np.random.Generator, count: int, mean_a: float, mean_b: float) -> tuple[np.ndarray, np.ndarray]:
    """Run index per slot for a two-state process with geometric dwell times; odd runs are state B."""
    runs: list[np.ndarray] = []
    total = 0
    while total < count:
        n = max(16, int(2 * count / (mean_a + mean_b)) + 16)
        a = rng.geometric(1.0 / max(mean_a, 1.0), size=n)
        b = rng.geometric(1.0 / max(mean_b, 1.0), size=n)
        block = np.empty(2 * n, dtype=np.int64)
        block[0::2], block[1::2] = a, b
        runs.append(block)
        total += int(block.sum())
    lengths = np.concatenate(runs)
    run_of_slot = np.repeat(np.arange(lengths.size), lengths)[:count]
    return run_of_slot, lengths


def clear_sky(grid: TimeGrid, params: ProfileParams = ProfileParams(), *, utc_offset_hours: float = 0.0) -> np.ndarray:
    """Normalised clear-sky output: 1 at local solar noon, 0 at night."""
    clock = _clock(grid, utc_offset_hours)
    daylen = 12.0 + params.daylength_amp_h * np.sin(2.0 * np.pi * (clock.doy - 80.0) / 365.25)
    x = (clock.hours - (12.0 - daylen / 2.0)) / daylen
    return np.where((x > 0.0) & (x < 1.0), np.sin(np.pi * np.clip(x, 0.0, 1.0)), 0.0)


def gen_pv_overlay(
    seed: int,
    home_index: int,
    grid: TimeGrid,
    capacity_kw: float,
    *,
    cloudy: bool = True,
    params: ProfileParams = ProfileParams(),
    utc_offset_hours: float = 0.0,
) -> MeterSeries:
    """Non-positive PV generation: clear-sky bell times a cloud-shading process."""
    if not capacity_kw > 0:
        raise ConfigError(f"PV capacity must be positive, got {capacity_kw}")
    output = clear_sky(grid, params, utc_offset_hours=utc_offset_hours)
    if cloudy:
        rng = _rng(seed, home_index, _PV)
        clock = _clock(grid, utc_offset_hours)
        day_class = rng.choice(3, p=params.day_class_p, size=clock.n_days)[clock.day]
        per_min = 60.0 / grid.interval_s
        run, lengths = _alternating_runs(
            rng, grid.count, params.cloud_clear_minutes * per_min, params.cloud_shade_minutes * per_min
        )
        depth = rng.uniform(*params.cloud_depth, size=lengths.size)
        shade = np.where(run % 2 == 1, depth[run], 1.0)
        sparse_run, sparse_len = _alternating_runs(
            rng, grid.count, params.clear_day_cloud_minutes * per_min, params.cloud_shade_minutes * per_min
        )
        sparse_depth = rng.uniform(*params.cloud_depth, size=sparse_len.size)
        sparse = np.where(sparse_run % 2 == 1, sparse_depth[sparse_run], 1.0)
        overcast = rng.uniform(*params.overcast_factor, size=clock.n_days)[clock.day]
        factor = np.select([day_class == 1, day_class == 2], [shade, overcast], sparse)
        output = output * factor
    return MeterSeries(home_id(home_index), grid, 0.0 - capacity_kw * output)


def pv_capacity(seed: int, home_index: int, params: ProfileParams = ProfileParams()) -> float:
    return float(_rng(seed, home_index, _PV_CAPACITY).uniform(*params.pv_capacity_kw))


def _home(spec: FleetSpec, i: int, grid: TimeGrid, resample_s: int | None) -> HomeSpec:
    p, off = spec.profile, spec.utc_offset_hours
    base = gen_base_profile(spec.seed, i, grid, p, utc_offset_hours=off)
    ev = pv = None
    if i < spec.n_ev:
        ev = gen_ev_overlay(spec.seed, i, grid, mode=spec.ev_mode, params=p, utc_offset_hours=off)
    elif i < spec.n_ev + spec.n_pv:
        pv = gen_pv_overlay(spec.seed, i, grid, pv_capacity(spec.seed, i, p), params=p, utc_offset_hours=off)
    if resample_s is not None and resample_s != grid.interval_s:
        n = resample_values(np.zeros(grid.count), grid.interval_s, resample_s).shape[0]
        coarse = TimeGrid(grid.start, int(resample_s), n)
        shrink = lambda s: None if s is None else MeterSeries(s.customer_id, coarse, resample_values(s.values, grid.interval_s, resample_s))  # noqa: E731
        base, ev, pv = shrink(base), shrink(ev), shrink(pv)
    return HomeSpec(home_id(i), base, ev, pv)


@dataclass(frozen=True)
class SyntheticFleet:
    spec: FleetSpec
    homes: tuple[HomeSpec, ...]

    @property
    def categories(self) -> dict[str, str]:
        return {h.home_id: h.category for h in self.homes}

    @property
    def grid(self) -> TimeGrid:
        return self.homes[0].grid

    def net(self) -> Fleet:
        return compose_fleet(self.homes, utc_offset_hours=self.spec.utc_offset_hours)

    def counterfactual(self, *drop: str) -> list[HomeSpec]:
        """Homes with the named components removed (e.g. ``"ev"`` for a no-EV system)."""
        return [h.without(*drop) for h in self.homes]


def gen_fleet(spec: FleetSpec, *, resample_s: int | None = None) -> SyntheticFleet:
    """First ``n_ev`` homes get EV overlays, the next ``n_pv`` PV overlays, the rest neither.

    With ``resample_s`` every component is generated on the native grid and
    averaged down before it is kept, which bounds memory for long spans.
    """
    grid = spec.grid
    return SyntheticFleet(spec, tuple(_home(spec, i, grid, resample_s) for i in range(spec.n_homes)))


def materialize_fleet(spec: FleetSpec) -> tuple[Fleet, dict[str, str]]:
    """Net demand for every home built straight into one matrix (components are not kept)."""
    grid = spec.grid
    values = np.empty((spec.n_homes, grid.count))
    categories = {}
    for i in range(spec.n_homes):
        home = _home(spec, i, grid, None)
        values[i] = compose_home(home, utc_offset_hours=spec.utc_offset_hours).values
        categories[home.home_id] = home.category
    return Fleet([home_id(i) for i in range(spec.n_homes)], grid, values), categories


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_fleet(
    fleet: Fleet,
    out_dir: str | Path,
    *,
    categories: dict[str, str] | None = None,
    spec: FleetSpec | None = None,
    fmt: str = "csv",
    extra: dict | None = None,
) -> Path:
    """Write ``fleet.<fmt>`` plus ``fleet.manifest.json`` into ``out_dir``; returns the data path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out / "fleet.csv"
        write_meter_csv(fleet, path)
    elif fmt == "npz":
        path = out / "fleet.npz"
        save_fleet(fleet, path)
    else:
        raise ConfigError(f"unknown fleet format {fmt!r}")
    manifest = {
        "file": path.name,
        "sha256": sha256(path),
        "grid": fleet.grid.to_dict(),
        "customers": len(fleet),
        "seed": spec.seed if spec is not None else None,
        "spec": spec.to_dict() if spec is not None else None,
        "categories": categories or {},
    }
    if extra:
        manifest.update(extra)
    (out / "fleet.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_categories(fleet_path: str | Path) -> dict[str, str] | None:
    """Categories from the ``fleet.manifest.json`` sitting next to a fleet file, if any."""
    manifest = Path(fleet_path).with_name("fleet.manifest.json")
    if not manifest.exists():
        return None
    return json.loads(manifest.read_text()).get("categories") or None


def with_profile(spec: FleetSpec, **changes) -> FleetSpec:
    return replace(spec, profile=replace(spec.profile, **changes))
