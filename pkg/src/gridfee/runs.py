"""Scenario spec files and the result artifacts written for every command.

A scenario spec is a JSON object::

    {
      "scenario_id": "battery",
      "fleet": {"seed": 7, "n_homes": 200, "days": 731} | {"path": "fleet.csv"},
      "resample_s": 900,
      "drop": ["ev"],
      "battery": {"count": 25, "among": "PV", "power_kw": 2.0,
                  "charge_window": ["01:00", "03:00"], "discharge_window": ["17:00", "19:00"]},
      "peak": {...}, "tariff": {...}, "revenue": {...}, "impacts": {...},
      "groups": [["home_0000", "home_0150"]],
      "baseline": {"battery": null},
      "freeze_threshold": false,
      "bin_width": 10
    }

``baseline`` holds top-level overrides describing the comparison scenario;
when present, per-home deltas of the grid-access bill (this scenario relative
to the baseline) are written per category.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from gridfee.billing import NA, cents
from gridfee.config import RunConfig, flatten, parse_clock, validate
from gridfee.errors import ConfigError, GridFeeError, OverlappingGroups, SpecError, UnknownHome
from gridfee.scenarios import (
    BATTERY,
    NON_DER,
    PV,
    PV_BATTERY,
    BatteryParams,
    DeltaReport,
    HomeSpec,
    ScenarioResult,
    aggregate_customers,
    compose_fleet,
    evaluate_fleet,
    frozen_peak,
    penetration_delta,
)
from gridfee.synth import FleetSpec, gen_fleet, read_categories, sha256
from gridfee.timeseries import Fleet, read_fleet, resample_fleet

TOP_KEYS = {
    "scenario_id", "fleet", "resample_s", "utc_offset_hours", "drop", "battery", "peak", "tariff",
    "revenue", "impacts", "groups", "group_ids", "baseline", "freeze_threshold", "bin_width", "description",
}
CONFIG_SECTIONS = ("peak", "tariff", "revenue", "impacts")
DROPPABLE = ("ev", "pv")


@dataclass(frozen=True)
class BatteryPlan:
    params: BatteryParams
    count: int | None = None
    among: str = PV
    homes: tuple[str, ...] | None = None

    def select(self, homes: Sequence[HomeSpec], categories: Mapping[str, str]) -> list[str]:
        if self.homes is not None:
            known = {h.home_id for h in homes}
            missing = [h for h in self.homes if h not in known]
            if missing:
                raise SpecError(f"battery homes not in fleet: {missing[:5]}")
            return sorted(self.homes)
        pool = sorted(h.home_id for h in homes if categories[h.home_id] == self.among)
        n = len(pool) if self.count is None else self.count
        if n > len(pool):
            raise SpecError(f"battery count {n} exceeds the {len(pool)} {self.among!r} homes")
        return pool[:n]

    def to_dict(self) -> dict:
        return {"count": self.count, "among": self.among, "homes": list(self.homes) if self.homes else None, **self.params.to_dict()}


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: str
    config: RunConfig
    fleet_spec: FleetSpec | None = None
    fleet_path: Path | None = None
    resample_s: int | None = None
    utc_offset_hours: float | None = None
    drop: tuple[str, ...] = ()
    battery: BatteryPlan | None = None
    groups: tuple[tuple[str, ...], ...] = ()
    group_ids: tuple[str, ...] | None = None
    baseline: ScenarioSpec | None = None
    freeze_threshold: bool = False
    bin_width: float = 10.0
    raw: dict = field(default_factory=dict)

    @property
    def seed(self) -> int | None:
        return self.fleet_spec.seed if self.fleet_spec is not None else None

    @property
    def local_offset_hours(self) -> float:
        """Offset used for battery windows: explicit, else the generated fleet's, else UTC."""
        if self.utc_offset_hours is not None:
            return self.utc_offset_hours
        return self.fleet_spec.utc_offset_hours if self.fleet_spec is not None else 0.0


def _battery_plan(data: Mapping[str, Any]) -> BatteryPlan:
    data = dict(data)
    count = data.pop("count", None)
    among = data.pop("among", PV)
    homes = data.pop("homes", None)
    kwargs: dict[str, Any] = {}
    for key in ("charge_window", "discharge_window"):
        if key in data:
            lo, hi = data.pop(key)
            kwargs[key] = (parse_clock(lo), parse_clock(hi))
    for key in ("power_kw", "round_trip_efficiency"):
        if key in data:
            kwargs[key] = float(data.pop(key))
    if data:
        raise SpecError(f"unknown battery field(s): {sorted(data)}")
    if count is not None and (not isinstance(count, int) or count < 0):
        raise SpecError("battery count must be a non-negative integer")
    return BatteryPlan(BatteryParams(**kwargs), count, among, tuple(homes) if homes is not None else None)


def parse_scenario(data: Mapping[str, Any], *, base_dir: Path = Path("."), config: RunConfig | None = None, _nested: bool = False) -> ScenarioSpec:
    """Validate a scenario mapping. Every problem surfaces as SpecError."""
    try:
        return _parse(dict(data), base_dir, config, _nested)
    except SpecError:
        raise
    except (GridFeeError, TypeError, ValueError, KeyError) as exc:
        raise SpecError(f"invalid scenario spec: {exc}") from None


def _parse(data: dict, base_dir: Path, config: RunConfig | None, nested: bool) -> ScenarioSpec:
    unknown = set(data) - TOP_KEYS
    if unknown:
        raise SpecError(f"unknown scenario key(s): {sorted(unknown)}")
    if "fleet" not in data:
        raise SpecError("scenario needs a 'fleet' entry")
    base_values = dict(config.values) if config is not None else {}
    overrides = {}
    for section in CONFIG_SECTIONS:
        sub = data.get(section) or {}
        if not isinstance(sub, Mapping):
            raise SpecError(f"'{section}' must be an object")
        overrides.update(flatten(sub, section + "."))
    run = RunConfig(validate({**base_values, **overrides}), config.source if config is not None else None)
    # resolving the typed configs here surfaces bad values at parse time
    run.peak(), run.tariff(), run.revenue(), run.impacts()

    fleet = data["fleet"]
    if not isinstance(fleet, Mapping):
        raise SpecError("'fleet' must be an object")
    fleet_spec = fleet_path = None
    if "path" in fleet:
        if set(fleet) - {"path"}:
            raise SpecError("a fleet given by path takes no other fields")
        fleet_path = (base_dir / fleet["path"]).resolve()
    else:
        fields = {**run.fleet_fields(), **fleet}
        fleet_spec = FleetSpec.from_dict(fields)

    drop = tuple(data.get("drop") or ())
    bad = [d for d in drop if d not in DROPPABLE]
    if bad:
        raise SpecError(f"can only drop {DROPPABLE}, got {bad}")
    if drop and fleet_path is not None:
        raise SpecError("'drop' needs a synthetic fleet (components are not stored in fleet files)")
    battery = _battery_plan(data["battery"]) if data.get("battery") else None

    groups = tuple(tuple(g) for g in data.get("groups") or ())
    if any(len(g) == 0 for g in groups):
        raise SpecError("groups must be non-empty")
    group_ids = tuple(data["group_ids"]) if data.get("group_ids") else None

    baseline = None
    if data.get("baseline") is not None:
        if nested:
            raise SpecError("a baseline cannot carry its own baseline")
        over = data["baseline"]
        if not isinstance(over, Mapping):
            raise SpecError("'baseline' must be an object of overrides")
        merged = {k: v for k, v in data.items() if k not in ("baseline", "groups", "group_ids")}
        merged.update(over)
        merged.setdefault("scenario_id", f"{data.get('scenario_id', 'scenario')}-baseline")
        if merged["scenario_id"] == data.get("scenario_id"):
            merged["scenario_id"] += "-baseline"
        baseline = _parse(merged, base_dir, config, True)

    resample = data.get("resample_s", run.get("fleet.resample_s"))
    bin_width = float(data.get("bin_width", run.get("output.bin_width", 10.0)))
    if not bin_width > 0:
        raise SpecError("bin_width must be positive")
    return ScenarioSpec(
        scenario_id=str(data.get("scenario_id", "scenario")),
        config=run,
        fleet_spec=fleet_spec,
        fleet_path=fleet_path,
        resample_s=int(resample) if resample is not None else None,
        utc_offset_hours=data.get("utc_offset_hours"),
        drop=drop,
        battery=battery,
        groups=groups,
        group_ids=group_ids,
        baseline=baseline,
        freeze_threshold=bool(data.get("freeze_threshold", False)),
        bin_width=bin_width,
        raw=data,
    )


def load_scenario(path: str | Path, config: RunConfig | None = None) -> ScenarioSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise SpecError(f"cannot read scenario {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, Mapping):
        raise SpecError(f"{path}: top level must be an object")
    return parse_scenario(data, base_dir=path.parent, config=config)


# ---------------------------------------------------------------- execution


class _FleetCache:
    """Synthetic fleets and loaded files shared between a scenario and its baseline."""

    def __init__(self) -> None:
        self._items: dict[Any, Any] = {}

    def homes(self, spec: ScenarioSpec) -> tuple[list[HomeSpec], dict[str, str], float]:
        if spec.fleet_spec is not None:
            key = ("synth", spec.fleet_spec, spec.resample_s)
            if key not in self._items:
                self._items[key] = gen_fleet(spec.fleet_spec, resample_s=spec.resample_s)
            synth = self._items[key]
            return list(synth.counterfactual(*spec.drop)), synth.categories, spec.local_offset_hours
        key = ("file", spec.fleet_path, spec.resample_s)
        if key not in self._items:
            try:
                fleet = read_fleet(spec.fleet_path)
            except OSError as exc:
                raise SpecError(f"cannot read fleet {spec.fleet_path}: {exc}") from None
            if spec.resample_s is not None and spec.resample_s != fleet.grid.interval_s:
                fleet = resample_fleet(fleet, spec.resample_s)
            cats = read_categories(spec.fleet_path) or {}
            self._items[key] = (fleet, {c: cats.get(c, NON_DER) for c in fleet.customer_ids})
        fleet, cats = self._items[key]
        return [HomeSpec(s.customer_id, s) for s in fleet], cats, spec.local_offset_hours


def _with_batteries(homes: list[HomeSpec], categories: dict[str, str], plan: BatteryPlan | None) -> tuple[list[HomeSpec], dict[str, str]]:
    cats = dict(categories)
    if plan is None:
        return homes, cats
    chosen = set(plan.select(homes, categories))
    out = []
    for h in homes:
        if h.home_id in chosen:
            h = HomeSpec(h.home_id, h.base, h.ev, h.pv, plan.params)
            cats[h.home_id] = PV_BATTERY if categories[h.home_id] in (PV, PV_BATTERY) else BATTERY
        out.append(h)
    return out, cats


def _evaluate(spec: ScenarioSpec, cache: _FleetCache, peak_override=None) -> ScenarioResult:
    homes, cats, offset = cache.homes(spec)
    # a home keeps its designated category when its overlay is dropped
    homes, cats = _with_batteries(homes, cats, spec.battery)
    fleet = compose_fleet(homes, utc_offset_hours=offset)
    run = spec.config
    return evaluate_fleet(
        fleet,
        peak_override or run.peak(),
        run.tariff(),
        scenario_id=spec.scenario_id,
        revenue=run.revenue(),
        options=run.impacts(),
        categories=cats,
    )


@dataclass(frozen=True)
class ScenarioRun:
    spec: ScenarioSpec
    result: ScenarioResult
    baseline: ScenarioResult | None = None
    deltas: tuple[DeltaReport, ...] = ()
    aggregated: ScenarioResult | None = None


def execute(spec: ScenarioSpec) -> ScenarioRun:
    cache = _FleetCache()
    baseline = None
    if spec.baseline is not None:
        baseline = _evaluate(spec.baseline, cache)
    peak = frozen_peak(baseline) if (baseline is not None and spec.freeze_threshold) else None
    result = _evaluate(spec, cache, peak)
    deltas: tuple[DeltaReport, ...] = ()
    if baseline is not None:
        cats = sorted(set(result.categories.values()))
        deltas = tuple([penetration_delta(result, baseline)] + [penetration_delta(result, baseline, c) for c in cats])
    aggregated = None
    if spec.groups:
        try:
            aggregated = aggregate_customers(result, spec.groups, group_ids=spec.group_ids)
        except (UnknownHome, OverlappingGroups, ConfigError) as exc:
            raise SpecError(f"invalid groups: {exc}") from None
    return ScenarioRun(spec, result, baseline, deltas, aggregated)


# ---------------------------------------------------------------- artifacts


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return NA if isinstance(x, float) and math.isnan(x) else repr(float(x))


def write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n")


def _json_default(obj: Any) -> Any:
    if hasattr(obj, "item"):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _nan_safe(obj: Any) -> Any:
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, Mapping):
        return {k: _nan_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_safe(v) for v in obj]
    return obj


def write_impacts(result: ScenarioResult, out: Path, prefix: str = "") -> list[Path]:
    csv_path, json_path = out / f"{prefix}impacts.csv", out / f"{prefix}impacts.json"
    result.report.to_csv(csv_path)
    write_json(json_path, _nan_safe(result.report.to_json()))
    return [csv_path, json_path]


def write_bills(result: ScenarioResult, out: Path, bin_width: float = 10.0, prefix: str = "") -> list[Path]:
    st = result.statement
    bills, hist, summary = out / f"{prefix}bills.csv", out / f"{prefix}histograms.csv", out / f"{prefix}summary.json"
    st.to_csv(bills)
    _write_csv(hist, ("category", "bin_lo_pct", "bin_hi_pct", "count"), [
        (r["category"], repr(r["bin_lo_pct"]), repr(r["bin_hi_pct"]), r["count"]) for r in st.histogram_rows(bin_width)
    ])
    data = {
        "scenario_id": result.scenario_id,
        "threshold_kw": result.indicator.threshold_kw,
        "k_kw": result.indicator.k_kw,
        "totals": st.summary(),
        "categories": result.category_summary(),
        "bin_width_pct": bin_width,
    }
    write_json(summary, _nan_safe(data))
    return [bills, hist, summary]


def write_deltas(deltas: Sequence[DeltaReport], out: Path, bin_width: float = 10.0) -> list[Path]:
    rows, hist = [], []
    for d in deltas:
        label = d.category or "all"
        if d.category is not None:
            for i, c in enumerate(d.customer_ids):
                rows.append((label, c, cents(d.bill_without[i]), cents(d.bill_with[i]), cents(d.bill_with[i] - d.bill_without[i]), _fmt(d.pct[i])))
        for lo, hi, n in d.histogram(bin_width):
            hist.append((label, repr(lo), repr(hi), n))
    p1, p2 = out / "deltas.csv", out / "delta_histograms.csv"
    _write_csv(p1, ("category", "customer_id", "bill_baseline_usd", "bill_scenario_usd", "delta_usd", "pct_change"), rows)
    _write_csv(p2, ("category", "bin_lo_pct", "bin_hi_pct", "count"), hist)
    return [p1, p2]


def aggregation_rows(result: ScenarioResult) -> list[tuple]:
    """Per group: one row per member billed alone, then the group billed as one."""
    rows = []
    for g in result.aggregation:
        for m, w, vs, bill in zip(g.members, g.member_w, g.member_v_share, g.member_bill_new):
            rows.append((g.group_id, m, repr(w), repr(100.0 * vs), cents(bill), "", ""))
        rows.append((g.group_id, "individual_total", repr(math.fsum(g.member_w)), repr(100.0 * math.fsum(g.member_v_share)), cents(g.individual_total), "", ""))
        rows.append((g.group_id, "aggregated", repr(g.group_w), repr(100.0 * g.group_v_share), cents(g.group_bill_new), cents(g.savings), _fmt(g.savings_pct)))
    return rows


def write_aggregation(result: ScenarioResult, out: Path) -> list[Path]:
    path = out / "aggregation.csv"
    _write_csv(path, ("group_id", "entity", "w", "v_share_pct", "bill_new_usd", "savings_usd", "savings_pct"), aggregation_rows(result))
    return [path]


def write_manifest(out: Path, command: str, files: Sequence[Path], *, config: dict, seed: int | None, result: ScenarioResult | None = None, extra: dict | None = None) -> Path:
    """``manifest.json`` listing checksums of ``files``. Contains no timestamps or absolute paths."""
    data: dict[str, Any] = {
        "command": command,
        "config": config,
        "seed": seed,
        "files": {p.name: sha256(p) for p in sorted(files, key=lambda p: p.name)},
    }
    if result is not None:
        data["threshold_kw"] = result.indicator.threshold_kw
        data["k_kw"] = result.indicator.k_kw
        data["grid"] = result.fleet.grid.to_dict()
        data["customers"] = len(result.fleet)
    if extra:
        data.update(extra)
    path = out / "manifest.json"
    write_json(path, _nan_safe(data))
    return path


def spec_echo(spec: ScenarioSpec) -> dict:
    out = {
        "scenario_id": spec.scenario_id,
        "fleet": spec.fleet_spec.to_dict() if spec.fleet_spec is not None else {"path": spec.fleet_path.name},
        "resample_s": spec.resample_s,
        "utc_offset_hours": spec.utc_offset_hours,
        "drop": list(spec.drop),
        "battery": spec.battery.to_dict() if spec.battery is not None else None,
        "groups": [list(g) for g in spec.groups],
        "freeze_threshold": spec.freeze_threshold,
        "bin_width": spec.bin_width,
        "run": spec.config.echo(),
    }
    if spec.baseline is not None:
        out["baseline"] = spec_echo(spec.baseline)
    return out


def write_run(run: ScenarioRun, out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    spec = run.spec
    files = write_impacts(run.result, out) + write_bills(run.result, out, spec.bin_width)
    cat_path = out / "categories.csv"
    _write_csv(cat_path, ("customer_id", "category"), sorted(run.result.categories.items()))
    files.append(cat_path)
    if run.baseline is not None:
        files += write_bills(run.baseline, out, spec.bin_width, prefix="baseline_")
        files += write_deltas(run.deltas, out, spec.bin_width)
    if run.aggregated is not None:
        files += write_aggregation(run.aggregated, out)
        files += write_bills(run.aggregated, out, spec.bin_width, prefix="aggregated_")
    extra = {"scenario": spec_echo(spec)}
    if run.baseline is not None:
        extra["baseline_threshold_kw"] = run.baseline.indicator.threshold_kw
    files.append(write_manifest(out, "scenario", files, config=spec.config.echo(), seed=spec.seed, result=run.result, extra=extra))
    return files


def load_fleet_with_categories(path: str | Path, resample_s: int | None = None) -> tuple[Fleet, dict[str, str]]:
    fleet = read_fleet(path)
    if resample_s is not None and resample_s != fleet.grid.interval_s:
        fleet = resample_fleet(fleet, resample_s)
    cats = read_categories(path) or {}
    return fleet, {c: cats.get(c, NON_DER) for c in fleet.customer_ids}
