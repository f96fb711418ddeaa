"""Grid impact factors: peak-weighted demand magnitude and demand variability."""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from gridfee.errors import DegenerateTotal, GridMismatch, LengthMismatch
from gridfee.peak import IndicatorSeries
from gridfee.timeseries import DiffSeries, Fleet, MeterSeries, SystemSeries, as_fleet, diff_values, row_chunks

# relative tolerance of the share denominator against the values' own scale
DEGENERATE_RTOL = 1e-12
# agreement required between the element-wise and matrix-product W paths
W_PATH_RTOL = 1e-9


@dataclass(frozen=True, slots=True)
class ImpactOptions:
    clamp_negative_w: bool = False
    leave_one_out: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ImpactReport:
    customer_ids: tuple[str, ...]
    w: np.ndarray
    v: np.ndarray
    w_share: np.ndarray
    v_share: np.ndarray

    @property
    def sum_w(self) -> float:
        return float(np.sum(self.w))

    @property
    def sum_v(self) -> float:
        return float(np.sum(self.v))

    def index(self, customer_id: str) -> int:
        return self.customer_ids.index(customer_id)

    def rows(self) -> Iterable[dict]:
        for i, c in enumerate(self.customer_ids):
            yield {
                "customer_id": c,
                "w": float(self.w[i]),
                "w_share": float(self.w_share[i]),
                "v": float(self.v[i]),
                "v_share": float(self.v_share[i]),
            }

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("customer_id,w,w_share,v,v_share\n")
            for r in self.rows():
                fh.write(f"{r['customer_id']},{r['w']!r},{r['w_share']!r},{r['v']!r},{r['v_share']!r}\n")

    def to_json(self) -> dict:
        return {"sum_w": self.sum_w, "sum_v": self.sum_v, "customers": list(self.rows())}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def _w_elementwise(values: np.ndarray, mu: np.ndarray) -> np.ndarray:
    out = np.empty(values.shape[0])
    for lo, hi in row_chunks(*values.shape):
        out[lo:hi] = (values[lo:hi] * mu).sum(axis=1)
    return out


def demand_magnitude(
    fleet: Fleet | Iterable[MeterSeries],
    indicator: IndicatorSeries,
    *,
    clamp_negative: bool = False,
    verify: bool = True,
) -> np.ndarray:
    """Per-customer ``W_i = sum_t X_i^t mu^t`` in fleet order.

    Computed as the matrix-vector product ``X @ mu``; with ``verify`` the
    per-slot element-wise sum is evaluated too and the two must agree to
    ``W_PATH_RTOL``. ``clamp_negative`` drops exports (X < 0) from the sum.
    """
    fleet = as_fleet(fleet)
    if fleet.grid != indicator.grid:
        raise GridMismatch(f"fleet grid {fleet.grid} differs from indicator grid {indicator.grid}")
    mu = indicator.mu
    if clamp_negative:
        w = np.empty(len(fleet))
        for lo, hi in row_chunks(*fleet.values.shape):
            w[lo:hi] = np.maximum(fleet.values[lo:hi], 0.0) @ mu
        check = (lambda: _w_elementwise(np.maximum(fleet.values, 0.0), mu)) if verify else None
    else:
        w = fleet.values @ mu
        check = (lambda: _w_elementwise(fleet.values, mu)) if verify else None
    if check is not None:
        other = check()
        scale = max(float(np.abs(w).max()), np.finfo(float).tiny)
        if not np.allclose(w, other, rtol=W_PATH_RTOL, atol=W_PATH_RTOL * scale):
            raise ArithmeticError("element-wise and matrix W disagree beyond tolerance")
    return w


def _pearson_rows(deltas: np.ndarray, beta_c: np.ndarray, beta_ss: float, leave_one_out: bool) -> np.ndarray:
    dc = deltas - deltas.mean(axis=1, keepdims=True)
    cross = dc @ beta_c
    ss = np.einsum("ij,ij->i", dc, dc)
    if leave_one_out:
        # correlate against beta - dX_i without materialising it
        num = cross - ss
        other_ss = beta_ss - 2.0 * cross + ss
    else:
        num = cross
        other_ss = np.full_like(ss, beta_ss)
    denom = np.sqrt(ss * np.maximum(other_ss, 0.0))
    out = np.zeros_like(num)
    ok = (ss > 0) & (denom > 0)
    out[ok] = num[ok] / denom[ok]
    return out


def _centered_beta(beta: np.ndarray) -> tuple[np.ndarray, float]:
    beta_c = beta - beta.mean()
    return beta_c, float(beta_c @ beta_c)


def demand_variability(dx: DiffSeries | np.ndarray, system: SystemSeries | np.ndarray, *, leave_one_out: bool = False) -> float:
    """Pearson correlation of one customer's step changes with the system's.

    Returns 0 when either sequence has zero variance.
    """
    d = np.asarray(dx.deltas if isinstance(dx, DiffSeries) else dx, dtype=np.float64)
    beta = np.asarray(system.variability if isinstance(system, SystemSeries) else system, dtype=np.float64)
    if d.shape != beta.shape or d.ndim != 1:
        raise LengthMismatch(f"variability series lengths differ: {d.shape} vs {beta.shape}")
    if d.size < 2:
        raise LengthMismatch("need at least two samples for a correlation")
    beta_c, beta_ss = _centered_beta(beta)
    return float(_pearson_rows(d[None, :], beta_c, beta_ss, leave_one_out)[0])


def fleet_variability(fleet: Fleet, system: SystemSeries, *, leave_one_out: bool = False) -> np.ndarray:
    """Per-customer V against the system variability, computed in row chunks."""
    if fleet.grid != system.grid:
        raise GridMismatch(f"fleet grid {fleet.grid} differs from system grid {system.grid}")
    if fleet.grid.count < 2:
        raise LengthMismatch("need at least two samples for a correlation")
    beta_c, beta_ss = _centered_beta(system.variability)
    out = np.empty(len(fleet))
    for lo, hi in row_chunks(*fleet.values.shape):
        out[lo:hi] = _pearson_rows(diff_values(fleet.values[lo:hi]), beta_c, beta_ss, leave_one_out)
    return out


def shares(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Each value over the total. Raises DegenerateTotal when the total is ~0."""
    arr = np.asarray(values, dtype=np.float64)
    total = float(np.sum(arr))
    scale = float(np.sum(np.abs(arr)))
    if arr.size == 0 or scale == 0.0 or abs(total) <= DEGENERATE_RTOL * scale:
        raise DegenerateTotal(f"total {total!r} is zero relative to its terms (scale {scale!r})")
    return arr / total


def impact_report(
    fleet: Fleet | Iterable[MeterSeries],
    indicator: IndicatorSeries,
    system: SystemSeries,
    options: ImpactOptions = ImpactOptions(),
) -> ImpactReport:
    fleet = as_fleet(fleet)
    w = demand_magnitude(fleet, indicator, clamp_negative=options.clamp_negative_w)
    v = fleet_variability(fleet, system, leave_one_out=options.leave_one_out)
    try:
        w_share = shares(w)
    except DegenerateTotal as exc:
        raise DegenerateTotal(f"demand magnitude: {exc}") from None
    try:
        v_share = shares(v)
    except DegenerateTotal as exc:
        raise DegenerateTotal(f"demand variability: {exc}") from None
    for arr in (w, v, w_share, v_share):
        arr.flags.writeable = False
    return ImpactReport(fleet.customer_ids, w, v, w_share, v_share)
