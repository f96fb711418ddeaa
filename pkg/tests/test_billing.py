from __future__ import annotations

import math
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import T0, fleet, series
from gridfee.billing import (
    RevenueConfig,
    TariffConfig,
    bill_grid_access,
    bill_volumetric,
    cents,
    compare_bills,
    histogram,
    impact_tiers,
    legacy_bills,
    subgroup_bills,
    target_revenue,
)
from gridfee.errors import ConfigError, CustomerSetMismatch, DegenerateShares, EmptyFleet
from gridfee.impacts import ImpactReport
from gridfee.scenarios import evaluate_fleet
from gridfee.synth import FleetSpec, materialize_fleet

seeds = st.integers(0, 2**32 - 1)
VERBATIM = TariffConfig(export_sign_mode="verbatim")


def report(w_share, v_share) -> ImpactReport:
    w, v = np.asarray(w_share, dtype=float), np.asarray(v_share, dtype=float)
    return ImpactReport(tuple(f"c{i}" for i in range(w.size)), w, v, w, v)


def naive_bill(values, interval_s: int, tariff: TariffConfig) -> float:
    """Interval-by-interval legacy bill, one branch per sample."""
    hours = interval_s / 3600.0
    parts = []
    for x in values:
        e = float(x) * hours
        if x >= 0:
            parts.append(tariff.volumetric_rate * e)
        elif tariff.export_sign_mode == "credit":
            parts.append(tariff.export_rate * e)
        else:
            parts.append(-tariff.export_rate * e)
    return math.fsum(parts)


class TestVolumetric:
    def test_one_kw_for_one_hour(self):
        b = bill_volumetric(series(np.ones(60)))
        assert b == pytest.approx(0.05, rel=1e-12)
        assert cents(b) == "0.05"

    def test_export_credit(self):
        assert bill_volumetric(series(-np.ones(60))) == pytest.approx(-0.02, rel=1e-12)

    def test_export_verbatim_is_a_charge(self):
        assert bill_volumetric(series(-np.ones(60)), VERBATIM) == pytest.approx(0.02, rel=1e-12)

    def test_zero(self):
        assert bill_volumetric(series(np.zeros(60))) == 0.0

    def test_resolution_independent(self):
        a = bill_volumetric(series(np.full(4, 2.0), interval_s=900))
        b = bill_volumetric(series(np.full(60, 2.0), interval_s=60))
        assert a == pytest.approx(b, rel=1e-12) == pytest.approx(0.1, rel=1e-12)

    @pytest.mark.parametrize("tariff", [TariffConfig(), VERBATIM], ids=["credit", "verbatim"])
    @given(seed=seeds)
    def test_matches_naive_loop(self, tariff, seed):
        x = np.random.default_rng(seed).normal(0.0, 2.0, size=(3, 200))
        f = fleet(x, interval_s=300)
        got = legacy_bills(f, tariff)
        for i in range(3):
            want = naive_bill(x[i], 300, tariff)
            assert abs(got[i] - want) <= 1e-9 * max(1.0, abs(want))

    @given(seeds, st.floats(0.001, 10))
    def test_credit_mode_monotone_in_consumption(self, seed, bump):
        r = np.random.default_rng(seed)
        x = r.normal(0.0, 2.0, size=50)
        overlay = r.uniform(0, bump, size=50)
        before = legacy_bills(fleet([x]))[0]
        after = legacy_bills(fleet([x + overlay]))[0]
        assert after >= before

    def test_assessment_period(self):
        f = fleet([np.ones(120)])
        t = TariffConfig(assessment_period=(T0 + timedelta(minutes=60), None))
        assert legacy_bills(f, t)[0] == pytest.approx(0.05, rel=1e-12)


class TestTargetRevenue:
    def test_sum(self):
        assert target_revenue([10.0, 20.0]) == 30.0
        assert target_revenue({"a": 7.0}) == 7.0

    def test_empty(self):
        with pytest.raises(EmptyFleet):
            target_revenue([])

    def test_synthetic_fleet_against_interval_oracle(self):
        f, _ = materialize_fleet(FleetSpec(seed=11, days=2, interval_s=900))
        tariff = TariffConfig()
        pool = target_revenue(legacy_bills(f, tariff))
        brute = math.fsum(naive_bill(row, 900, tariff) for row in f.values)
        assert abs(pool - brute) <= 1e-9 * abs(brute)


class TestGridAccess:
    def test_single_customer(self):
        assert bill_grid_access(report([1.0], [1.0]), 123.45)[0] == pytest.approx(123.45, rel=1e-15)

    def test_two_identical(self):
        np.testing.assert_array_equal(bill_grid_access(report([0.5, 0.5], [0.5, 0.5]), 100.0), [50.0, 50.0])

    def test_hand_linear_combination(self):
        got = bill_grid_access(report([0.8, 0.2], [0.5, 0.5]), 100.0, TariffConfig(pi_w_fraction=0.75, pi_v_fraction=0.25))
        np.testing.assert_allclose(got, [72.5, 27.5], rtol=1e-15)

    def test_rejects_bad_shares(self):
        with pytest.raises(DegenerateShares):
            bill_grid_access(report([0.5, 0.6], [0.5, 0.5]), 100.0)
        with pytest.raises(DegenerateShares):
            bill_grid_access(report([np.nan, 1.0], [0.5, 0.5]), 100.0)

    def test_negative_bills_allowed(self):
        got = bill_grid_access(report([0.0, 1.0], [-0.5, 1.5]), 100.0)
        assert got[0] < 0 and math.fsum(got) == pytest.approx(100.0, rel=1e-12)

    @given(seeds, st.integers(1, 8))
    def test_homogeneous_in_revenue_power_of_two_exact(self, seed, k):
        r = np.random.default_rng(seed)
        w = r.dirichlet(np.ones(6))
        v = r.normal(size=6)
        v /= v.sum()
        rep = report(w, v)
        base = bill_grid_access(rep, 1000.0)
        np.testing.assert_array_equal(bill_grid_access(rep, 1000.0 * 2.0**k), base * 2.0**k)

    @given(seeds, st.floats(0.01, 100.0))
    def test_homogeneous_in_revenue(self, seed, c):
        r = np.random.default_rng(seed)
        w = r.dirichlet(np.ones(6))
        v = r.normal(size=6)
        v /= v.sum()
        rep, t = report(w, v), TariffConfig()
        base, scaled = bill_grid_access(rep, 1000.0, t), bill_grid_access(rep, 1000.0 * c, t)
        magnitude = np.abs(w) * 750.0 + np.abs(v) * 250.0
        assert np.all(np.abs(scaled - c * base) <= 1e-12 * c * magnitude)

    def test_pi_split_validated(self):
        with pytest.raises(ConfigError):
            TariffConfig(pi_w_fraction=0.7, pi_v_fraction=0.2)

    def test_explicit_revenue(self):
        assert RevenueConfig("explicit", 500.0).resolve([1.0, 2.0]) == 500.0
        with pytest.raises(ConfigError):
            RevenueConfig("explicit")


class TestStatement:
    def test_pct_changes(self):
        st_ = compare_bills({"a": 100.0, "b": 100.0, "c": 0.0}, {"a": 80.0, "b": 100.0, "c": 5.0})
        np.testing.assert_array_equal(st_.pct_change[:2], [-20.0, 0.0])
        assert math.isnan(st_.pct_change[2])
        rows = list(st_.rows())
        assert rows[2]["pct_change"] == "n/a"
        assert rows[2]["delta_usd"] == "5.00"

    def test_customer_mismatch(self):
        with pytest.raises(CustomerSetMismatch):
            compare_bills({"a": 1.0}, {"b": 1.0})

    def test_csv_header(self, tmp_path):
        compare_bills({"a": 1.0}, {"a": 2.0}).to_csv(tmp_path / "s.csv")
        header = (tmp_path / "s.csv").read_text().splitlines()[0].split(",")
        assert header[:4] == ["customer_id", "bill_old_usd", "bill_new_usd", "pct_change"]

    @pytest.mark.parametrize(("amount", "text"), [(0.125, "0.12"), (0.135, "0.14"), (2.675, "2.68"), (-1.005, "-1.00"), (3.0, "3.00")])
    def test_cents_half_even(self, amount, text):
        assert cents(amount) == text

    def test_histogram_bins(self):
        assert histogram([-15.0, -5.0, 0.0, 9.99, 10.0, np.nan], 10.0) == [
            (-20.0, -10.0, 1),
            (-10.0, 0.0, 1),
            (0.0, 10.0, 2),
            (10.0, 20.0, 1),
        ]

    def test_histogram_counts_everything(self, rng):
        values = rng.normal(0, 40, size=500)
        assert sum(n for _, _, n in histogram(values, 7.5)) == 500

    @given(seeds, st.integers(1, 40))
    def test_revenue_conserved(self, seed, n):
        r = np.random.default_rng(seed)
        x = r.gamma(2.0, 1.0, size=(n, 96)) - r.uniform(0, 1, size=(n, 1)) * (r.uniform(size=(n, 96)) < 0.3)
        res = evaluate_fleet(fleet(x, interval_s=900))
        old, new = math.fsum(res.statement.bill_old), math.fsum(res.statement.bill_new)
        assert abs(new - old) <= 1e-9 * abs(old)


class TestSubgroups:
    def test_subgroup_mean_preserves_total(self):
        bills = {"a": 10.0, "b": 20.0, "c": 5.0}
        out = subgroup_bills(bills, {"a": "x", "b": "x", "c": "y"})
        assert out == {"a": 15.0, "b": 15.0, "c": 5.0}
        assert math.fsum(out.values()) == math.fsum(bills.values())

    def test_tiers(self):
        rep = report([0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25])
        assert impact_tiers(rep, tier_names=("low", "high")) == {"c0": "low", "c1": "low", "c2": "high", "c3": "high"}
        labels = impact_tiers(rep, der={"c0": True, "c3": True}, tier_names=("low", "high"))
        assert labels["c0"] == "DER/low" and labels["c3"] == "DER/high" and labels["c1"] == "non-DER/low"
