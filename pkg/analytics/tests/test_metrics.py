import math

import numpy as np
import pandas as pd
import pytest

from analytics.exceptions import InsufficientData, InvalidReturn, MetricsError
from analytics.metrics import (
    DailySeries,
    MetricsBundle,
    column_pearson,
    daily_ic_series,
    daily_rank_ic_series,
    ic_daily,
    icir,
    max_drawdown,
    prediction_metrics,
    rank_ic_daily,
    sharpe_ratio,
    strategy_metrics,
)


def naive_ranks(values):
    """Average 1-based ranks, ties sharing the mean of their positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def naive_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b)) / n
    sa = math.sqrt(sum((x - ma) ** 2 for x in a) / n)
    sb = math.sqrt(sum((y - mb) ** 2 for y in b) / n)
    return cov / (sa * sb)


def finite_pairs(pred, real):
    return zip(*[(p, r) for p, r in zip(pred, real) if math.isfinite(p) and math.isfinite(r)])


def test_ic_examples():
    real = np.array([0.3, -0.1, 0.2, 0.05])

    assert ic_daily(real, real) == pytest.approx(1.0)
    assert ic_daily(-real, real) == pytest.approx(-1.0)
    assert ic_daily([1.0, 2.0, 3.0], [3.0, 1.0, 2.0]) == pytest.approx(-0.5)


def test_ic_degenerate_inputs():
    with pytest.raises(InsufficientData):
        ic_daily([1.0, np.nan], [1.0, 2.0])
    assert math.isnan(ic_daily([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))
    with pytest.raises(MetricsError):
        ic_daily([1.0, 2.0], [1.0, 2.0, 3.0])


def test_rank_ic_examples():
    real = np.array([0.3, -0.1, 0.2, 0.05, 0.4])

    assert rank_ic_daily(np.exp(real * 10), real) == pytest.approx(1.0)
    assert rank_ic_daily([1.0, 2.0, 3.0], [3.0, 1.0, 2.0]) == pytest.approx(-0.5)
    assert math.isnan(rank_ic_daily([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]))


def test_correlations_match_direct_formulas():
    rng = np.random.default_rng(0)
    for _ in range(200):
        size = int(rng.integers(3, 301))
        pred = rng.standard_normal(size)
        real = rng.standard_normal(size)
        # coarse grid so ranks see ties
        pred[: size // 3] = np.round(pred[: size // 3], 1)
        pred[rng.random(size) < 0.1] = np.nan
        real[rng.random(size) < 0.1] = np.nan
        a, b = (list(v) for v in finite_pairs(pred, real))
        if len(a) < 2 or len(set(a)) < 2 or len(set(b)) < 2:
            continue

        assert ic_daily(pred, real) == pytest.approx(naive_pearson(a, b), abs=1e-10)
        expected = naive_pearson(naive_ranks(a), naive_ranks(b))
        assert rank_ic_daily(pred, real) == pytest.approx(expected, abs=1e-10)


def test_correlations_are_bounded_and_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pred = rng.standard_normal(40)
        real = 0.3 * pred + rng.standard_normal(40)
        perm = rng.permutation(40)

        assert abs(ic_daily(pred, real)) <= 1 + 1e-12
        assert ic_daily(pred[perm], real[perm]) == pytest.approx(ic_daily(pred, real), abs=1e-12)
        assert rank_ic_daily(pred[perm], real[perm]) == pytest.approx(
            rank_ic_daily(pred, real), abs=1e-12
        )
        assert rank_ic_daily(pred**3, np.exp(real)) == pytest.approx(
            rank_ic_daily(pred, real), abs=1e-12
        )


def test_column_pearson_matches_daily_ic():
    rng = np.random.default_rng(2)
    scores = rng.standard_normal((30, 20))
    returns = 0.1 * scores + rng.standard_normal((30, 20))
    scores[rng.random((30, 20)) < 0.15] = np.nan
    scores[:, 3] = np.nan
    scores[:, 4] = 0.5
    dates = pd.bdate_range("2022-01-03", periods=20)

    series = daily_ic_series(scores, returns, dates)

    for t in range(20):
        if t in (3, 4):
            assert math.isnan(series.values[t])
        else:
            expected = ic_daily(scores[:, t], returns[:, t])
            assert series.values[t] == pytest.approx(expected, abs=1e-12)
    np.testing.assert_allclose(
        column_pearson(scores, returns), series.values, atol=1e-12, equal_nan=True
    )


def test_daily_rank_ic_series_skips_thin_dates():
    scores = np.array([[1.0, np.nan], [2.0, 1.0], [3.0, np.nan]])
    returns = np.array([[0.1, 0.2], [0.3, 0.1], [0.2, 0.0]])

    series = daily_rank_ic_series(scores, returns, pd.bdate_range("2022-01-03", periods=2))

    assert series.values[0] == pytest.approx(0.5)
    assert math.isnan(series.values[1])


def test_icir_examples():
    assert math.isnan(icir([0.05, 0.05, 0.05]))
    assert icir([0.1, -0.1]) == pytest.approx(0.0)
    assert icir([0.1, 0.2, 0.3]) == pytest.approx(2.449489, rel=1e-5)
    with pytest.raises(InsufficientData):
        icir([0.1, np.nan])


def test_prediction_metrics_ignore_nan_days():
    dates = pd.bdate_range("2022-01-03", periods=4)
    ic = DailySeries(dates, [0.1, np.nan, 0.3, 0.2])

    metrics = prediction_metrics(ic, ic)

    assert metrics["ic"] == pytest.approx(0.2)
    assert metrics["icir"] == pytest.approx(0.2 / np.std([0.1, 0.3, 0.2]))
    assert metrics["rank_ic"] == metrics["ic"]


def test_constant_return_annualizes_exactly():
    metrics = strategy_metrics([0.001] * 100)

    assert metrics.arr == pytest.approx(1.001**252 - 1.0, rel=1e-10)
    assert metrics.mdd == 0.0
    assert math.isnan(metrics.calmar)
    assert math.isnan(metrics.ir)


def test_max_drawdown_example():
    nav = np.array([1.0, 1.2, 0.9, 1.1])
    returns = nav[1:] / nav[:-1] - 1.0

    assert max_drawdown(nav) == pytest.approx(-0.25)
    metrics = strategy_metrics(returns)
    assert metrics.mdd == pytest.approx(-0.25)
    assert metrics.calmar == pytest.approx(metrics.arr / 0.25)


def test_max_drawdown_matches_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(5):
        nav = np.cumprod(1.0 + rng.normal(0.0, 0.02, 300))
        worst = min(
            nav[e] / nav[s] - 1.0 for s in range(len(nav)) for e in range(s, len(nav))
        )
        assert max_drawdown(nav) == pytest.approx(worst, abs=1e-12)


def test_invalid_and_empty_returns():
    with pytest.raises(InvalidReturn):
        strategy_metrics([0.01, -1.0])
    with pytest.raises(InsufficientData):
        strategy_metrics([])


def test_sharpe_ratio():
    returns = np.array([0.01, -0.005, 0.002, 0.004])

    expected = returns.mean() / returns.std() * math.sqrt(252)
    assert sharpe_ratio(returns) == pytest.approx(expected)
    assert strategy_metrics(returns).sharpe == strategy_metrics(returns).ir


def test_metrics_bundle_round_trip():
    bundle = MetricsBundle(0.05, 0.4, 0.06, 0.5, 0.12, 1.1, -0.08, math.nan)

    payload = bundle.to_dict()
    restored = MetricsBundle.from_dict(payload)

    assert payload["calmar"] is None
    assert restored.ic == 0.05
    assert math.isnan(restored.calmar)
    assert MetricsBundle.nan().is_nan()
    with pytest.raises(MetricsError):
        MetricsBundle(0, 0, 0, 0, 0, 0, 0.1, 0)


def test_daily_series_validation():
    dates = pd.bdate_range("2022-01-03", periods=3)

    with pytest.raises(MetricsError):
        DailySeries(dates, [1.0, 2.0])
    with pytest.raises(MetricsError):
        DailySeries(dates[::-1], [1.0, 2.0, 3.0])
    assert len(DailySeries(dates, [1.0, np.nan, 3.0]).dropna()) == 2
