"""Home composition, battery dispatch and the case-study pipelines.

``run_scenario`` is the full chain for one fleet configuration:
compose homes, total the system, resolve the peak threshold for *this*
fleet, compute impact factors, then legacy and grid-access bills.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from datetime import time

import numpy as np

from gridfee.billing import (
    BillStatement,
    RevenueConfig,
    TariffConfig,
    bill_grid_access,
    compare_bills,
    histogram,
    legacy_bills,
    pct_change,
)
from gridfee.errors import (
    ConfigError,
    CustomerSetMismatch,
    GridMismatch,
    OverlappingGroups,
    OverlaySignViolation,
    UnknownHome,
    WindowOverlap,
)
from gridfee.impacts import ImpactOptions, ImpactReport, impact_report
from gridfee.peak import ABSOLUTE, IndicatorSeries, PeakConfig, indicator_series
from gridfee.timeseries import (
    Fleet,
    MeterSeries,
    SystemSeries,
    TimeGrid,
    aggregate_system,
    resample_values,
    sum_series,
)

EV = "EV"
PV = "PV"
PV_BATTERY = "PV+battery"
BATTERY = "battery"
NON_DER = "non-DER"
AGGREGATE = "aggregate"


@dataclass(frozen=True, slots=True)
class BatteryParams:
    """Time-triggered battery: fixed-power charge and discharge windows in local time.

    Discharge power is ``power_kw * round_trip_efficiency`` so that each day's
    discharged energy equals the charged energy times the efficiency.
    """

    power_kw: float = 2.0
    charge_window: tuple[time, time] = (time(1, 0), time(3, 0))
    discharge_window: tuple[time, time] = (time(17, 0), time(19, 0))
    round_trip_efficiency: float = 1.0

    def __post_init__(self) -> None:
        if self.power_kw < 0 or not math.isfinite(self.power_kw):
            raise ConfigError("battery power must be a finite non-negative kW value")
        if not 0.0 < self.round_trip_efficiency <= 1.0:
            raise ConfigError("round-trip efficiency must lie in (0, 1]")
        for w in (self.charge_window, self.discharge_window):
            if _seconds(w[0]) == _seconds(w[1]):
                raise ConfigError(f"battery window {w} is empty")
        if _windows_overlap(self.charge_window, self.discharge_window):
            raise WindowOverlap(f"charge window {self.charge_window} overlaps discharge window {self.discharge_window}")

    def to_dict(self) -> dict:
        fmt = lambda w: [w[0].strftime("%H:%M"), w[1].strftime("%H:%M")]  # noqa: E731
        return {
            "power_kw": self.power_kw,
            "charge_window": fmt(self.charge_window),
            "discharge_window": fmt(self.discharge_window),
            "round_trip_efficiency": self.round_trip_efficiency,
        }


def _seconds(t: time) -> int:
    return t.hour * 3600 + t.minute * 60 + t.second


def _arcs(window: tuple[time, time]) -> list[tuple[int, int]]:
    lo, hi = _seconds(window[0]), _seconds(window[1])
    return [(lo, hi)] if lo < hi else [(lo, 86400), (0, hi)]


def _windows_overlap(a: tuple[time, time], b: tuple[time, time]) -> bool:
    return any(x0 < y1 and y0 < x1 for x0, x1 in _arcs(a) for y0, y1 in _arcs(b))


def _in_window(sod: np.ndarray, window: tuple[time, time]) -> np.ndarray:
    mask = np.zeros(sod.shape, dtype=bool)
    for lo, hi in _arcs(window):
        mask |= (sod >= lo) & (sod < hi)
    return mask


def battery_dispatch(
    params: BatteryParams,
    grid: TimeGrid,
    *,
    utc_offset_hours: float = 0.0,
    home_id: str = "battery",
) -> MeterSeries:
    """Charge at ``+power`` in the charge window, discharge in the discharge window, idle otherwise.

    A slot belongs to a window when its start time does.
    """
    sod = grid.seconds_of_day(utc_offset_hours)
    values = np.zeros(grid.count)
    values[_in_window(sod, params.charge_window)] = params.power_kw
    values[_in_window(sod, params.discharge_window)] = -params.power_kw * params.round_trip_efficiency
    return MeterSeries(home_id, grid, values)


@dataclass(frozen=True)
class HomeSpec:
    home_id: str
    base: MeterSeries
    ev: MeterSeries | None = None
    pv: MeterSeries | None = None
    battery: BatteryParams | None = None

    def __post_init__(self) -> None:
        for name in ("ev", "pv"):
            overlay = getattr(self, name)
            if overlay is not None and overlay.grid != self.base.grid:
                raise GridMismatch(f"{self.home_id}: {name} overlay grid differs from base grid")
        if self.ev is not None and (self.ev.values < 0).any():
            raise OverlaySignViolation(f"{self.home_id}: EV overlay must be >= 0 everywhere")
        if self.pv is not None and (self.pv.values > 0).any():
            raise OverlaySignViolation(f"{self.home_id}: PV overlay must be <= 0 everywhere")

    @property
    def category(self) -> str:
        if self.ev is not None:
            return EV
        if self.pv is not None:
            return PV_BATTERY if self.battery is not None else PV
        if self.battery is not None:
            return BATTERY
        return NON_DER

    @property
    def grid(self) -> TimeGrid:
        return self.base.grid

    def without(self, *components: str) -> HomeSpec:
        """Copy with the named components ("ev", "pv", "battery") removed."""
        return replace(self, **{c: None for c in components})


def compose_home(spec: HomeSpec, *, utc_offset_hours: float = 0.0) -> MeterSeries:
    """Net demand: base + EV + PV + battery dispatch."""
    net = spec.base.values.copy()
    if spec.ev is not None:
        net += spec.ev.values
    if spec.pv is not None:
        net += spec.pv.values
    if spec.battery is not None:
        net += battery_dispatch(spec.battery, spec.grid, utc_offset_hours=utc_offset_hours).values
    return MeterSeries(spec.home_id, spec.grid, net)


@dataclass(frozen=True)
class GroupOutcome:
    """One aggregated group compared with its members billed individually."""

    group_id: str
    members: tuple[str, ...]
    member_w: tuple[float, ...]
    member_v_share: tuple[float, ...]
    member_bill_new: tuple[float, ...]
    group_w: float
    group_v_share: float
    group_bill_new: float

    @property
    def individual_total(self) -> float:
        return math.fsum(self.member_bill_new)

    @property
    def savings(self) -> float:
        return self.individual_total - self.group_bill_new

    @property
    def savings_pct(self) -> float:
        total = self.individual_total
        return 100.0 * self.savings / abs(total) if total else math.nan


@dataclass(frozen=True)
class ScenarioResult:
    scenario_id: str
    fleet: Fleet
    system: SystemSeries
    indicator: IndicatorSeries
    report: ImpactReport
    statement: BillStatement
    categories: Mapping[str, str]
    peak: PeakConfig
    tariff: TariffConfig
    revenue: RevenueConfig
    options: ImpactOptions
    aggregation: tuple[GroupOutcome, ...] = field(default=())

    def category_summary(self) -> dict[str, dict]:
        out = {}
        for cat in self.statement.category_names():
            ids = [c for c in self.report.customer_ids if self.categories.get(c) == cat]
            rows = [self.report.index(c) for c in ids]
            out[cat] = {
                **self.statement.summary(cat),
                "sum_w_share": math.fsum(self.report.w_share[rows]),
                "sum_v_share": math.fsum(self.report.v_share[rows]),
                "mean_v": float(np.mean(self.report.v[rows])) if rows else math.nan,
            }
        return out

    def bill_new(self, customer_id: str) -> float:
        return float(self.statement.bill_new[self.statement.index(customer_id)])


def frozen_peak(result: ScenarioResult) -> PeakConfig:
    """Peak config that reuses ``result``'s resolved threshold and strictness."""
    return PeakConfig(mode=ABSOLUTE, peak_fraction=None, absolute_threshold_kw=result.indicator.threshold_kw, k_kw=result.indicator.k_kw)


def evaluate_fleet(
    fleet: Fleet,
    peak: PeakConfig = PeakConfig(),
    tariff: TariffConfig = TariffConfig(),
    *,
    scenario_id: str = "scenario",
    revenue: RevenueConfig = RevenueConfig(),
    options: ImpactOptions = ImpactOptions(),
    categories: Mapping[str, str] | None = None,
) -> ScenarioResult:
    """Impacts and both bills for a fleet of net demand series."""
    if tariff.assessment_period is not None:
        fleet = fleet.window(*tariff.assessment_period)
    system = aggregate_system(fleet)
    indicator = indicator_series(system, peak)
    report = impact_report(fleet, indicator, system, options)
    old = legacy_bills(fleet, tariff)
    pool = revenue.resolve(old)
    new = bill_grid_access(report, pool, tariff)
    cats = dict(categories) if categories is not None else {c: NON_DER for c in fleet.customer_ids}
    statement = compare_bills((fleet.customer_ids, old), (fleet.customer_ids, new), total_target_revenue=pool, categories=cats)
    return ScenarioResult(scenario_id, fleet, system, indicator, report, statement, cats, peak, tariff, revenue, options)


def compose_fleet(
    homes: Sequence[HomeSpec],
    *,
    utc_offset_hours: float = 0.0,
    resample_s: int | None = None,
) -> Fleet:
    """Net demand of every home as one Fleet, optionally resampled."""
    if not homes:
        raise UnknownHome("scenario has no homes")
    homes = sorted(homes, key=lambda h: h.home_id)
    grid = homes[0].grid
    for h in homes[1:]:
        if h.grid != grid:
            raise GridMismatch(f"{h.home_id} is on {h.grid}, expected {grid}")
    target = grid
    if resample_s is not None and resample_s != grid.interval_s:
        probe = resample_values(np.zeros(grid.count), grid.interval_s, resample_s)
        target = TimeGrid(grid.start, int(resample_s), probe.shape[0])
    values = np.empty((len(homes), target.count))
    for i, h in enumerate(homes):
        net = compose_home(h, utc_offset_hours=utc_offset_hours).values
        values[i] = resample_values(net, grid.interval_s, target.interval_s) if target is not grid else net
    return Fleet([h.home_id for h in homes], target, values)


def run_scenario(
    homes: Sequence[HomeSpec],
    peak: PeakConfig = PeakConfig(),
    tariff: TariffConfig = TariffConfig(),
    *,
    scenario_id: str = "scenario",
    revenue: RevenueConfig = RevenueConfig(),
    options: ImpactOptions = ImpactOptions(),
    utc_offset_hours: float = 0.0,
    resample_s: int | None = None,
) -> ScenarioResult:
    fleet = compose_fleet(homes, utc_offset_hours=utc_offset_hours, resample_s=resample_s)
    categories = {h.home_id: h.category for h in homes}
    return evaluate_fleet(
        fleet, peak, tariff, scenario_id=scenario_id, revenue=revenue, options=options, categories=categories
    )


@dataclass(frozen=True)
class DeltaReport:
    category: str | None
    customer_ids: tuple[str, ...]
    bill_with: np.ndarray
    bill_without: np.ndarray
    pct: np.ndarray

    def histogram(self, bin_width: float = 10.0) -> list[tuple[float, float, int]]:
        return histogram(self.pct, bin_width)

    def majority_sign(self) -> int:
        pos, neg = int((self.pct > 0).sum()), int((self.pct < 0).sum())
        return (pos > neg) - (neg > pos)


def penetration_delta(with_: ScenarioResult, without: ScenarioResult, category: str | None = None) -> DeltaReport:
    """Per-home % change of the grid-access bill from ``without`` to ``with_``.

    ``category`` selects homes by their category in ``with_``; None keeps all.
    """
    a, b = with_.statement, without.statement
    if set(a.customer_ids) != set(b.customer_ids):
        raise CustomerSetMismatch("scenarios cover different homes")
    ids = tuple(c for c in a.customer_ids if category is None or with_.categories.get(c) == category)
    bw = np.asarray([a.bill_new[a.index(c)] for c in ids])
    bo = np.asarray([b.bill_new[b.index(c)] for c in ids])
    return DeltaReport(category, ids, bw, bo, pct_change(bo, bw))


def aggregate_customers(
    result: ScenarioResult,
    groups: Sequence[Iterable[str]],
    *,
    group_ids: Sequence[str] | None = None,
) -> ScenarioResult:
    """Bill each group as one customer and recompute every share and bill.

    System demand, the peak indicator and the revenue pool are carried over
    unchanged, since the total load does not change. A group's legacy bill is
    the sum of its members' legacy bills.
    """
    groups = [tuple(sorted(set(g))) for g in groups]
    if group_ids is None:
        group_ids = [f"group_{i:02d}" for i in range(len(groups))]
    if len(group_ids) != len(groups):
        raise ConfigError("need one id per group")
    seen: set[str] = set()
    for g in groups:
        for member in g:
            if member not in result.fleet:
                raise UnknownHome(f"unknown home {member!r}")
            if member in seen:
                raise OverlappingGroups(f"home {member!r} is in more than one group")
            seen.add(member)
    for gid in group_ids:
        if gid in result.fleet and gid not in seen:
            raise ConfigError(f"group id {gid!r} collides with an existing customer")

    fleet = result.fleet
    series = [s for s in fleet if s.customer_id not in seen]
    series += [sum_series([fleet[m] for m in g], gid) for g, gid in zip(groups, group_ids)]
    new_fleet = Fleet.from_series(series)

    report = impact_report(new_fleet, result.indicator, result.system, result.options)
    pool = result.statement.total_target_revenue
    new = bill_grid_access(report, pool, result.tariff)

    prev = result.statement
    old_map = {c: float(prev.bill_old[i]) for i, c in enumerate(prev.customer_ids) if c not in seen}
    cats = {c: result.categories[c] for c in old_map}
    for g, gid in zip(groups, group_ids):
        old_map[gid] = math.fsum(prev.bill_old[prev.index(m)] for m in g)
        cats[gid] = AGGREGATE
    statement = compare_bills(old_map, dict(zip(report.customer_ids, new)), total_target_revenue=pool, categories=cats)

    outcomes = []
    for g, gid in zip(groups, group_ids):
        rows = [result.report.index(m) for m in g]
        gi = report.index(gid)
        outcomes.append(
            GroupOutcome(
                group_id=gid,
                members=g,
                member_w=tuple(float(result.report.w[r]) for r in rows),
                member_v_share=tuple(float(result.report.v_share[r]) for r in rows),
                member_bill_new=tuple(float(prev.bill_new[prev.index(m)]) for m in g),
                group_w=float(report.w[gi]),
                group_v_share=float(report.v_share[gi]),
                group_bill_new=float(statement.bill_new[statement.index(gid)]),
            )
        )
    return replace(
        result,
        scenario_id=f"{result.scenario_id}+aggregated",
        fleet=new_fleet,
        report=report,
        statement=statement,
        categories=cats,
        aggregation=tuple(outcomes),
    )


def evaluate_feeders(
    fleet: Fleet,
    feeder_of: Mapping[str, str],
    peak: PeakConfig | Mapping[str, PeakConfig] = PeakConfig(),
    tariff: TariffConfig = TariffConfig(),
    *,
    revenue: Mapping[str, float] | None = None,
    options: ImpactOptions = ImpactOptions(),
    categories: Mapping[str, str] | None = None,
) -> dict[str, ScenarioResult]:
    """Run the pipeline separately on each feeder.

    Each feeder gets its own system curve and threshold; ``peak`` may map
    feeder ids to configs (e.g. absolute feeder ratings) and ``revenue`` maps
    feeder ids to an explicit target revenue (legacy-matched when absent).
    """
    missing = [c for c in fleet.customer_ids if c not in feeder_of]
    if missing:
        raise UnknownHome(f"no feeder assigned for {missing[:5]}")
    members: dict[str, list[str]] = {}
    for c in fleet.customer_ids:
        members.setdefault(feeder_of[c], []).append(c)
    out = {}
    for feeder in sorted(members):
        sub = fleet.subset(members[feeder])
        cfg = peak[feeder] if isinstance(peak, Mapping) else peak
        rev = RevenueConfig()
        if revenue is not None and feeder in revenue:
            rev = RevenueConfig(mode="explicit", amount=float(revenue[feeder]))
        cats = {c: categories[c] for c in sub.customer_ids} if categories is not None else None
        out[feeder] = evaluate_fleet(sub, cfg, tariff, scenario_id=feeder, revenue=rev, options=options, categories=cats)
    return out
