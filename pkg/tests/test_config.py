from __future__ import annotations

import json
from datetime import time

import pytest

from gridfee.config import CONFIG_ENV, RunConfig, flatten, load_config_file, parse_clock, parse_key_values, validate
from gridfee.errors import ConfigError


def test_key_values_with_comments():
    text = "# header\npeak.fraction = 0.1  # tighter\ntariff.export_mode=verbatim\nimpacts.leave_one_out = true\n"
    assert parse_key_values(text) == {"peak.fraction": 0.1, "tariff.export_mode": "verbatim", "impacts.leave_one_out": True}


def test_key_values_rejects_bare_words():
    with pytest.raises(ConfigError):
        parse_key_values("peak.fraction 0.1")


def test_nested_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"peak": {"fraction": 0.2}, "tariff.pi_w": 0.6}))
    assert load_config_file(p) == {"peak.fraction": 0.2, "tariff.pi_w": 0.6}


def test_json_detected_without_suffix(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text('{"revenue": {"amount": 10}}')
    assert load_config_file(p) == {"revenue.amount": 10}


@pytest.mark.parametrize("text", ["{bad", "[1, 2]"])
def test_bad_json(tmp_path, text):
    p = tmp_path / "c.json"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config_file(p)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "nope.cfg")


def test_flatten():
    assert flatten({"a": {"b": {"c": 1}}, "d": 2}) == {"a.b.c": 1, "d": 2}


def test_validate_unknown_and_coercion():
    with pytest.raises(ConfigError, match="peak.fractoin"):
        validate({"peak.fractoin": 0.2})
    assert validate({"fleet.seed": "12", "impacts.clamp_negative_w": "yes"}) == {"fleet.seed": 12, "impacts.clamp_negative_w": True}
    for bad in ({"fleet.seed": 1.5}, {"peak.fraction": "lots"}, {"impacts.leave_one_out": "maybe"}):
        with pytest.raises(ConfigError):
            validate(bad)


def test_defaults():
    cfg = RunConfig.resolve(None)
    assert cfg.peak().peak_fraction == 0.25 and cfg.peak().k_relative == 0.01
    t = cfg.tariff()
    assert (t.volumetric_rate, t.export_rate, t.pi_w_fraction, t.pi_v_fraction) == (0.05, 0.02, 0.75, 0.25)
    assert cfg.revenue().mode == "match_legacy"
    assert not cfg.impacts().leave_one_out


def test_env_var_and_flag_precedence(tmp_path, monkeypatch):
    p = tmp_path / "run.cfg"
    p.write_text("peak.fraction = 0.1\ntariff.pi_w = 0.6\n")
    monkeypatch.setenv(CONFIG_ENV, str(p))
    cfg = RunConfig.resolve(None, {"peak.fraction": 0.3, "tariff.pi_v": None})
    assert cfg.source == str(p)
    assert cfg.peak().peak_fraction == 0.3
    assert cfg.tariff().pi_v_fraction == pytest.approx(0.4)


def test_absolute_mode_inferred():
    cfg = RunConfig.resolve(None, {"peak.absolute_kw": 150.0})
    assert cfg.peak().mode == "absolute" and cfg.peak().absolute_threshold_kw == 150.0


def test_explicit_revenue_inferred():
    assert RunConfig.resolve(None, {"revenue.amount": 99.0}).revenue().resolve([1.0]) == 99.0


def test_period_parsed():
    cfg = RunConfig.resolve(None, {"tariff.period_start": "2016-02-01T00:00:00Z"})
    start, end = cfg.tariff().assessment_period
    assert start.month == 2 and end is None


def test_echo_is_json_ready():
    echo = RunConfig.resolve(None, {"peak.k_kw": 0.0}).echo()
    assert json.loads(json.dumps(echo))["peak"]["k_kw"] == 0.0


@pytest.mark.parametrize(("text", "value"), [("01:00", time(1)), ("17:30", time(17, 30)), ("24:00", time(0))])
def test_clock(text, value):
    assert parse_clock(text) == value


@pytest.mark.parametrize("text", ["1", "25:00", "aa:bb", "12:61"])
def test_bad_clock(text):
    with pytest.raises(ConfigError):
        parse_clock(text)
