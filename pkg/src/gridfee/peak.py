"""Peak demand threshold and the logistic peak indicator."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from gridfee.errors import ConfigError, EmptySeries, NegativeK
from gridfee.timeseries import SystemSeries, TimeGrid

PERCENTILE = "percentile"
ABSOLUTE = "absolute"


@dataclass(frozen=True, slots=True)
class PeakConfig:
    """How the peak threshold and strictness are resolved.

    ``peak_fraction`` is the share of slots treated as peak: 0.25 puts the
    threshold at the 75th percentile of system demand. In ``absolute`` mode
    ``absolute_threshold_kw`` is used instead (e.g. a feeder rating).
    Strictness is ``k_kw`` when given, else ``k_relative`` times the
    magnitude of the resolved threshold.
    """

    mode: str = PERCENTILE
    peak_fraction: float | None = 0.25
    absolute_threshold_kw: float | None = None
    k_kw: float | None = None
    k_relative: float = 0.01

    def __post_init__(self) -> None:
        if self.mode == PERCENTILE:
            if self.peak_fraction is None or not 0.0 < self.peak_fraction < 1.0:
                raise ConfigError(f"peak fraction must lie in (0, 1), got {self.peak_fraction}")
        elif self.mode == ABSOLUTE:
            if self.absolute_threshold_kw is None or not np.isfinite(self.absolute_threshold_kw):
                raise ConfigError("absolute peak mode needs a finite absolute_threshold_kw")
        else:
            raise ConfigError(f"unknown peak mode {self.mode!r}")
        if self.k_kw is not None and self.k_kw < 0:
            raise NegativeK(f"k must be >= 0, got {self.k_kw}")
        if self.k_relative < 0:
            raise NegativeK(f"relative k must be >= 0, got {self.k_relative}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, slots=True)
class IndicatorSeries:
    grid: TimeGrid
    mu: np.ndarray
    threshold_kw: float
    k_kw: float


def percentile_threshold(system: SystemSeries | np.ndarray, peak_fraction: float) -> float:
    """``(1 - peak_fraction)`` quantile of system demand, linear between order statistics."""
    demand = system.demand if isinstance(system, SystemSeries) else np.asarray(system, dtype=np.float64)
    if demand.size == 0:
        raise EmptySeries("cannot take a percentile of an empty series")
    if not 0.0 < peak_fraction < 1.0:
        raise ConfigError(f"peak fraction must lie in (0, 1), got {peak_fraction}")
    return float(np.quantile(demand, 1.0 - peak_fraction, method="linear"))


def mu(s_t, threshold: float, k: float):
    """Logistic peak indicator centred on ``threshold`` with width ``k`` (kW).

    ``k == 0`` gives the hard step: 0 below, 1 above, 0.5 at the threshold.
    Works on scalars and arrays.
    """
    if k < 0:
        raise NegativeK(f"k must be >= 0, got {k}")
    s = np.asarray(s_t, dtype=np.float64)
    if k == 0:
        out = np.where(s > threshold, 1.0, np.where(s < threshold, 0.0, 0.5))
    else:
        out = expit((s - threshold) / k)
    return float(out) if out.ndim == 0 else out


def resolve_threshold(system: SystemSeries, config: PeakConfig) -> tuple[float, float]:
    if config.mode == PERCENTILE:
        threshold = percentile_threshold(system, config.peak_fraction)
    else:
        threshold = float(config.absolute_threshold_kw)
    k = config.k_kw if config.k_kw is not None else config.k_relative * abs(threshold)
    return threshold, float(k)


def indicator_series(system: SystemSeries, config: PeakConfig) -> IndicatorSeries:
    if system.demand.size == 0:
        raise EmptySeries("system series is empty")
    threshold, k = resolve_threshold(system, config)
    values = np.asarray(mu(system.demand, threshold, k), dtype=np.float64).reshape(-1)
    values.flags.writeable = False
    return IndicatorSeries(system.grid, values, threshold, k)
