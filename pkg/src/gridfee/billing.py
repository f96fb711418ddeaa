"""Legacy volumetric/net-metering bills and grid-access bills.

Money is carried as float dollars. Per-customer energies are reduced with
numpy's pairwise summation and fleet totals with ``math.fsum``, so a bill is
a handful of correctly rounded operations away from exact regardless of how
many intervals it spans. Rounding to cents (half-even) happens only when a
statement is written out.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import datetime
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

import numpy as np

from gridfee.errors import ConfigError, CustomerSetMismatch, DegenerateShares, EmptyFleet
from gridfee.impacts import ImpactReport
from gridfee.timeseries import Fleet, MeterSeries, as_fleet, format_timestamp, row_chunks

CREDIT = "credit"
VERBATIM = "verbatim"
MATCH_LEGACY = "match_legacy"
EXPLICIT = "explicit"

SHARE_SUM_TOL = 1e-9
NA = "n/a"


@dataclass(frozen=True, slots=True)
class TariffConfig:
    """Legacy rates and the split of target revenue between W and V.

    ``export_sign_mode='credit'`` pays exporters ``export_rate`` per kWh;
    ``'verbatim'`` applies the printed net-metering formula, which turns
    exports into a positive charge.
    """

    volumetric_rate: float = 0.05
    export_rate: float = 0.02
    export_sign_mode: str = CREDIT
    pi_w_fraction: float = 0.75
    pi_v_fraction: float = 0.25
    assessment_period: tuple[datetime | None, datetime | None] | None = None

    def __post_init__(self) -> None:
        if self.volumetric_rate < 0 or self.export_rate < 0:
            raise ConfigError("rates must be non-negative")
        if self.export_sign_mode not in (CREDIT, VERBATIM):
            raise ConfigError(f"export sign mode must be {CREDIT!r} or {VERBATIM!r}")
        for name in ("pi_w_fraction", "pi_v_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if abs(self.pi_w_fraction + self.pi_v_fraction - 1.0) > 1e-12:
            raise ConfigError(f"pi_w + pi_v must equal 1, got {self.pi_w_fraction + self.pi_v_fraction}")

    def to_dict(self) -> dict:
        period = None
        if self.assessment_period is not None:
            period = [format_timestamp(t) if t is not None else None for t in self.assessment_period]
        return {
            "volumetric_rate": self.volumetric_rate,
            "export_rate": self.export_rate,
            "export_sign_mode": self.export_sign_mode,
            "pi_w_fraction": self.pi_w_fraction,
            "pi_v_fraction": self.pi_v_fraction,
            "assessment_period": period,
        }


@dataclass(frozen=True, slots=True)
class RevenueConfig:
    """``match_legacy`` fixes the pool to the sum of legacy bills; ``explicit`` uses ``amount``."""

    mode: str = MATCH_LEGACY
    amount: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in (MATCH_LEGACY, EXPLICIT):
            raise ConfigError(f"revenue mode must be {MATCH_LEGACY!r} or {EXPLICIT!r}")
        if self.mode == EXPLICIT and (self.amount is None or not math.isfinite(self.amount)):
            raise ConfigError("explicit revenue mode needs a finite amount")

    def resolve(self, old_bills: Sequence[float] | np.ndarray) -> float:
        if self.mode == EXPLICIT:
            return float(self.amount)
        return target_revenue(old_bills)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "amount": self.amount}


def _assessed(fleet: Fleet, tariff: TariffConfig) -> Fleet:
    if tariff.assessment_period is None:
        return fleet
    return fleet.window(*tariff.assessment_period)


def legacy_bills(fleet: Fleet | Iterable[MeterSeries], tariff: TariffConfig = TariffConfig()) -> np.ndarray:
    """Volumetric + net-metering bill of every customer over the assessment period."""
    fleet = _assessed(as_fleet(fleet), tariff)
    export_sign = 1.0 if tariff.export_sign_mode == CREDIT else -1.0
    hours = fleet.grid.interval_hours
    out = np.empty(len(fleet))
    for lo, hi in row_chunks(*fleet.values.shape):
        block = fleet.values[lo:hi]
        imported = np.maximum(block, 0.0).sum(axis=1) * hours
        exported = np.minimum(block, 0.0).sum(axis=1) * hours
        out[lo:hi] = tariff.volumetric_rate * imported + export_sign * tariff.export_rate * exported
    return out


def bill_volumetric(series: MeterSeries, tariff: TariffConfig = TariffConfig()) -> float:
    fleet = Fleet([series.customer_id], series.grid, series.values[None, :], validate=False)
    return float(legacy_bills(fleet, tariff)[0])


def target_revenue(old_bills: Sequence[float] | np.ndarray | Mapping[str, float]) -> float:
    values = list(old_bills.values()) if isinstance(old_bills, Mapping) else list(np.asarray(old_bills, dtype=float))
    if not values:
        raise EmptyFleet("no bills to total")
    return math.fsum(values)


def bill_grid_access(report: ImpactReport, revenue: float, tariff: TariffConfig = TariffConfig()) -> np.ndarray:
    """Split ``revenue`` by W share (``pi_w``) and V share (``pi_v``)."""
    for name, s in (("w_share", report.w_share), ("v_share", report.v_share)):
        total = math.fsum(s)
        if not np.isfinite(s).all() or abs(total - 1.0) > SHARE_SUM_TOL:
            raise DegenerateShares(f"{name} does not sum to 1 (sum={total!r})")
    pi_w = tariff.pi_w_fraction * revenue
    pi_v = tariff.pi_v_fraction * revenue
    return report.w_share * pi_w + report.v_share * pi_v


def cents(amount: float) -> str:
    return str(Decimal(repr(float(amount))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def pct_change(old: np.ndarray, new: np.ndarray) -> np.ndarray:
    """``100 * (new - old) / |old|``; NaN where ``old == 0``."""
    old = np.asarray(old, dtype=float)
    new = np.asarray(new, dtype=float)
    out = np.full(old.shape, np.nan)
    ok = old != 0
    out[ok] = 100.0 * (new[ok] - old[ok]) / np.abs(old[ok])
    return out


def histogram(values: Sequence[float] | np.ndarray, bin_width: float = 10.0) -> list[tuple[float, float, int]]:
    """Counts in ``[lo, lo + bin_width)`` bins aligned to multiples of ``bin_width``; NaNs skipped."""
    if bin_width <= 0:
        raise ConfigError("bin width must be positive")
    arr = np.asarray(values, dtype=float)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return []
    first = math.floor(arr.min() / bin_width)
    last = math.floor(arr.max() / bin_width)
    edges = np.arange(first, last + 2) * bin_width
    idx = np.clip(np.floor(arr / bin_width).astype(np.int64) - first, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]


def _summary(values: np.ndarray) -> dict:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return {"count": 0}
    return {
        "count": int(finite.size),
        "mean": float(finite.mean()),
        "median": float(np.median(finite)),
        "min": float(finite.min()),
        "max": float(finite.max()),
        "n_increase": int((finite > 0).sum()),
        "n_decrease": int((finite < 0).sum()),
        "n_unchanged": int((finite == 0).sum()),
    }


@dataclass(frozen=True)
class BillStatement:
    customer_ids: tuple[str, ...]
    bill_old: np.ndarray
    bill_new: np.ndarray
    total_target_revenue: float
    categories: tuple[str, ...] | None = None
    pct_change: np.ndarray = field(init=False)
    delta: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "pct_change", pct_change(self.bill_old, self.bill_new))
        object.__setattr__(self, "delta", self.bill_new - self.bill_old)

    def index(self, customer_id: str) -> int:
        return self.customer_ids.index(customer_id)

    def category_names(self) -> list[str]:
        if self.categories is None:
            return []
        return sorted(set(self.categories))

    def _mask(self, category: str | None) -> np.ndarray:
        if category is None:
            return np.ones(len(self.customer_ids), dtype=bool)
        if self.categories is None:
            return np.zeros(len(self.customer_ids), dtype=bool)
        return np.asarray([c == category for c in self.categories])

    def histogram(self, bin_width: float = 10.0, category: str | None = None) -> list[tuple[float, float, int]]:
        return histogram(self.pct_change[self._mask(category)], bin_width)

    def summary(self, category: str | None = None) -> dict:
        mask = self._mask(category)
        out = {
            "customers": int(mask.sum()),
            "sum_bill_old": math.fsum(self.bill_old[mask]),
            "sum_bill_new": math.fsum(self.bill_new[mask]),
            "pct_change": _summary(self.pct_change[mask]),
            "n_pct_undefined": int(np.isnan(self.pct_change[mask]).sum()),
        }
        if category is None:
            out["total_target_revenue"] = self.total_target_revenue
            old, new = out["sum_bill_old"], out["sum_bill_new"]
            out["revenue_conserved_rel_err"] = abs(new - old) / abs(old) if old else abs(new - old)
        return out

    def rows(self) -> Iterable[dict]:
        for i, c in enumerate(self.customer_ids):
            pct = self.pct_change[i]
            yield {
                "customer_id": c,
                "bill_old_usd": cents(self.bill_old[i]),
                "bill_new_usd": cents(self.bill_new[i]),
                "pct_change": NA if np.isnan(pct) else f"{pct:.6f}",
                "delta_usd": cents(self.delta[i]),
                "category": self.categories[i] if self.categories is not None else "",
            }

    def to_csv(self, path: str | Path) -> None:
        cols = ("customer_id", "bill_old_usd", "bill_new_usd", "pct_change", "delta_usd", "category")
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(cols) + "\n")
            for r in self.rows():
                fh.write(",".join(str(r[c]) for c in cols) + "\n")

    def histogram_rows(self, bin_width: float = 10.0) -> list[dict]:
        out = []
        for cat in [None, *self.category_names()]:
            for lo, hi, n in self.histogram(bin_width, cat):
                out.append({"category": cat or "all", "bin_lo_pct": lo, "bin_hi_pct": hi, "count": n})
        return out

    def summary_json(self, bin_width: float = 10.0) -> dict:
        return {
            "totals": self.summary(),
            "categories": {cat: self.summary(cat) for cat in self.category_names()},
            "bin_width_pct": bin_width,
            "histogram": self.histogram_rows(bin_width),
        }

    def write_json(self, path: str | Path, bin_width: float = 10.0) -> None:
        Path(path).write_text(json.dumps(self.summary_json(bin_width), indent=2) + "\n")


def _by_id(bills: Mapping[str, float] | tuple[Sequence[str], Sequence[float]]) -> dict[str, float]:
    if isinstance(bills, Mapping):
        return {str(k): float(v) for k, v in bills.items()}
    ids, values = bills
    return {str(k): float(v) for k, v in zip(ids, values, strict=True)}


def compare_bills(
    old: Mapping[str, float] | tuple[Sequence[str], Sequence[float]],
    new: Mapping[str, float] | tuple[Sequence[str], Sequence[float]],
    *,
    total_target_revenue: float | None = None,
    categories: Mapping[str, str] | None = None,
) -> BillStatement:
    """Line up legacy and proposed bills per customer.

    Bills are given as ``{customer_id: amount}`` or as ``(ids, amounts)``.
    ``pct_change`` is NaN (written as ``n/a``) where the legacy bill is zero;
    ``delta`` always carries the absolute change.
    """
    old_map, new_map = _by_id(old), _by_id(new)
    if set(old_map) != set(new_map):
        raise CustomerSetMismatch(
            f"customers differ: {sorted(set(old_map) ^ set(new_map))[:5]}"
        )
    ids = tuple(sorted(old_map))
    bill_old = np.asarray([old_map[c] for c in ids])
    bill_new = np.asarray([new_map[c] for c in ids])
    cats = None
    if categories is not None:
        cats = tuple(categories.get(c, "uncategorized") for c in ids)
    if total_target_revenue is None:
        total_target_revenue = math.fsum(bill_new)
    return BillStatement(ids, bill_old, bill_new, float(total_target_revenue), cats)


def subgroup_bills(bills: Mapping[str, float], labels: Mapping[str, str]) -> dict[str, float]:
    """Flatten bills to one fee per subgroup (the subgroup mean); totals are preserved."""
    groups: dict[str, list[str]] = {}
    for cid in bills:
        groups.setdefault(labels[cid], []).append(cid)
    out = {}
    for members in groups.values():
        fee = math.fsum(bills[c] for c in members) / len(members)
        for c in members:
            out[c] = fee
    return out


def impact_tiers(
    report: ImpactReport,
    tariff: TariffConfig = TariffConfig(),
    *,
    der: Mapping[str, bool] | None = None,
    tier_names: Sequence[str] = ("low", "medium", "high"),
) -> dict[str, str]:
    """Label customers by quantile tier of their combined impact share.

    The combined share is ``pi_w * w_share + pi_v * v_share``. When ``der`` is
    given, tiers are formed separately for DER and non-DER customers and the
    label is prefixed accordingly (``"DER/high"``).
    """
    combined = tariff.pi_w_fraction * report.w_share + tariff.pi_v_fraction * report.v_share
    ids = report.customer_ids
    pools: dict[str, list[int]] = {}
    for i, c in enumerate(ids):
        key = "" if der is None else ("DER" if der.get(c, False) else "non-DER")
        pools.setdefault(key, []).append(i)
    labels = {}
    n_tiers = len(tier_names)
    for key, members in pools.items():
        order = sorted(members, key=lambda i: (combined[i], ids[i]))
        for rank, i in enumerate(order):
            tier = tier_names[min(n_tiers - 1, rank * n_tiers // len(order))]
            labels[ids[i]] = f"{key}/{tier}" if key else tier
    return labels
