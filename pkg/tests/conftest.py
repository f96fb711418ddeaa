from __future__ import annotations

from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import settings

from gridfee.timeseries import Fleet, MeterSeries, TimeGrid

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

T0 = datetime(2016, 1, 1, tzinfo=timezone.utc)


def grid(count: int, interval_s: int = 60, start: datetime = T0) -> TimeGrid:
    return TimeGrid(start, interval_s, count)


def series(values, customer_id: str = "c0", interval_s: int = 60) -> MeterSeries:
    values = np.asarray(values, dtype=float)
    return MeterSeries(customer_id, grid(values.size, interval_s), values)


def fleet(rows, ids=None, interval_s: int = 60) -> Fleet:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    ids = ids or [f"c{i:03d}" for i in range(rows.shape[0])]
    return Fleet(ids, grid(rows.shape[1], interval_s), rows)


def dyadic(rng: np.random.Generator, shape, lo: int = -64, hi: int = 64) -> np.ndarray:
    """Multiples of 1/8 small enough that every sum below is exact in float64."""
    return rng.integers(lo, hi, size=shape).astype(float) / 8.0


def anti_correlated_pair(seed: int, *, days: int = 14, n_background: int = 20, tau: float = 0.125) -> Fleet:
    """Background homes plus ``pair_a``/``pair_b``, on a 15-min dyadic grid.

    Both pair members follow the evening peak; each carries a fast overlay
    that is the exact negative of the other's, so the pair's summed demand
    changes cancel it.
    """
    r = np.random.default_rng(seed)
    t = days * 96
    hour = (np.arange(t) % 96) / 4.0
    bump = np.exp(-(((hour - 19.0) / 1.5) ** 2))
    background = (1.0 + 2.0 * bump) * r.uniform(0.8, 1.2, (n_background, 1)) + r.normal(0.0, 0.3, (n_background, t))
    overlay = tau * np.sin(2.0 * np.pi * np.arange(t) / 8.0) * r.uniform(0.5, 1.5, t)
    follow = 2.0 + 3.0 * bump
    rows = np.round(np.vstack([follow + overlay, follow - overlay, background]) * 8.0) / 8.0
    ids = ["pair_a", "pair_b"] + [f"bg_{i:02d}" for i in range(n_background)]
    return Fleet(ids, grid(t, 900), rows)


# (number, title, passed, detail) for every acceptance criterion that ran
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}: {detail}")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
