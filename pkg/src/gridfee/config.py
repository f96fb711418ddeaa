"""Run configuration: config file (JSON or key=value) merged with command-line flags.

Keys are dotted ``section.name`` pairs from the sections ``peak``, ``tariff``,
``revenue``, ``impacts``, ``fleet`` and ``output``. JSON files may nest the
sections or use the dotted keys directly. Flags override file values.
"""

from __future__ import annotations

import json
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from datetime import time
from pathlib import Path
from typing import Any

from gridfee.billing import RevenueConfig, TariffConfig
from gridfee.errors import ConfigError
from gridfee.impacts import ImpactOptions
from gridfee.peak import ABSOLUTE, PERCENTILE, PeakConfig
from gridfee.timeseries import parse_timestamp

CONFIG_ENV = "GRIDFEE_CONFIG"

KEYS = {
    "peak.mode": str,
    "peak.fraction": float,
    "peak.absolute_kw": float,
    "peak.k_kw": float,
    "peak.k_relative": float,
    "tariff.volumetric_rate": float,
    "tariff.export_rate": float,
    "tariff.export_mode": str,
    "tariff.pi_w": float,
    "tariff.pi_v": float,
    "tariff.period_start": str,
    "tariff.period_end": str,
    "revenue.mode": str,
    "revenue.amount": float,
    "impacts.clamp_negative_w": bool,
    "impacts.leave_one_out": bool,
    "fleet.path": str,
    "fleet.seed": int,
    "fleet.n_homes": int,
    "fleet.ev_fraction": float,
    "fleet.pv_fraction": float,
    "fleet.days": int,
    "fleet.interval_s": int,
    "fleet.start": str,
    "fleet.utc_offset_hours": float,
    "fleet.ev_mode": str,
    "fleet.resample_s": int,
    "output.bin_width": float,
}


def _coerce(key: str, value: Any) -> Any:
    kind = KEYS[key]
    if value is None:
        return None
    try:
        if kind is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("true", "1", "yes", "on"):
                    return True
                if low in ("false", "0", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None


def flatten(data: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_key_values(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value.strip("\"'")
    return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path}: top level must be an object")
        return flatten(data)
    return parse_key_values(text)


def validate(values: Mapping[str, Any]) -> dict[str, Any]:
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return {k: _coerce(k, v) for k, v in values.items()}


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)
    source: str | None = None

    @classmethod
    def resolve(cls, path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
        """File at ``path`` (or ``$GRIDFEE_CONFIG``), then non-None ``overrides`` on top."""
        if path is None:
            path = os.environ.get(CONFIG_ENV) or None
        values: dict[str, Any] = {}
        if path is not None:
            values.update(load_config_file(path))
        values = validate(values)
        if overrides:
            values.update(validate({k: v for k, v in overrides.items() if v is not None}))
        return cls(values, str(path) if path is not None else None)

    def get(self, key: str, default: Any = None) -> Any:
        v = self.values.get(key)
        return default if v is None else v

    def peak(self) -> PeakConfig:
        absolute = self.get("peak.absolute_kw")
        mode = self.get("peak.mode", ABSOLUTE if absolute is not None else PERCENTILE)
        return PeakConfig(
            mode=mode,
            peak_fraction=self.get("peak.fraction", 0.25) if mode == PERCENTILE else None,
            absolute_threshold_kw=absolute,
            k_kw=self.get("peak.k_kw"),
            k_relative=self.get("peak.k_relative", 0.01),
        )

    def tariff(self) -> TariffConfig:
        pi_w = self.get("tariff.pi_w")
        pi_v = self.get("tariff.pi_v")
        if pi_w is None and pi_v is None:
            pi_w, pi_v = 0.75, 0.25
        elif pi_v is None:
            pi_v = 1.0 - pi_w
        elif pi_w is None:
            pi_w = 1.0 - pi_v
        start, end = self.get("tariff.period_start"), self.get("tariff.period_end")
        period = None
        if start is not None or end is not None:
            period = (parse_timestamp(start) if start else None, parse_timestamp(end) if end else None)
        return TariffConfig(
            volumetric_rate=self.get("tariff.volumetric_rate", 0.05),
            export_rate=self.get("tariff.export_rate", 0.02),
            export_sign_mode=self.get("tariff.export_mode", "credit"),
            pi_w_fraction=pi_w,
            pi_v_fraction=pi_v,
            assessment_period=period,
        )

    def revenue(self) -> RevenueConfig:
        amount = self.get("revenue.amount")
        mode = self.get("revenue.mode", "explicit" if amount is not None else "match_legacy")
        return RevenueConfig(mode=mode, amount=amount)

    def impacts(self) -> ImpactOptions:
        return ImpactOptions(
            clamp_negative_w=self.get("impacts.clamp_negative_w", False),
            leave_one_out=self.get("impacts.leave_one_out", False),
        )

    def fleet_fields(self) -> dict[str, Any]:
        names = ("seed", "n_homes", "ev_fraction", "pv_fraction", "days", "interval_s", "start", "utc_offset_hours", "ev_mode")
        return {n: self.values[f"fleet.{n}"] for n in names if self.values.get(f"fleet.{n}") is not None}

    def echo(self) -> dict[str, Any]:
        """Fully resolved configuration, for manifests."""
        return {
            "source": self.source,
            "values": dict(sorted(self.values.items())),
            "peak": self.peak().to_dict(),
            "tariff": self.tariff().to_dict(),
            "revenue": self.revenue().to_dict(),
            "impacts": self.impacts().to_dict(),
        }


def parse_clock(text: str) -> time:
    """``"HH:MM"`` as a clock time; ``"24:00"`` means midnight at the end of a window."""
    try:
        hh, mm = (int(p) for p in str(text).split(":"))
        if (hh, mm) == (24, 0):
            return time(0, 0)
        return time(hh, mm)
    except ValueError:
        raise ConfigError(f"expected HH:MM, got {text!r}") from None
