"""
Predictive-power and strategy performance metrics.

Predictive side: daily cross-sectional IC (Pearson) and Rank IC (Spearman,
average ranks for ties), aggregated over dates by mean and ICIR. Strategy
side: annualized return, information ratio, maximum drawdown and Calmar.
Population standard deviation is used throughout and a zero-variance input
(all compared values equal) gives NaN.
"""

import logging
import math
from dataclasses import asdict, astuple, dataclass, fields

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .exceptions import InsufficientData, InvalidReturn, MetricsError

logger = logging.getLogger(__name__)

TRADING_DAYS = 252


@dataclass(frozen=True, eq=False)
class DailySeries:
    dates: pd.DatetimeIndex
    values: np.ndarray

    def __post_init__(self):
        dates = pd.DatetimeIndex(self.dates)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if len(dates) != len(values):
            raise MetricsError(f"{len(dates)} dates for {len(values)} values")
        if len(dates) > 1 and not (dates[1:] > dates[:-1]).all():
            raise MetricsError("dates must be strictly increasing")
        values.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)

    def dropna(self):
        keep = ~np.isnan(self.values)
        return DailySeries(self.dates[keep], self.values[keep])

    def to_series(self, name="value"):
        return pd.Series(self.values, index=self.dates, name=name)


@dataclass(frozen=True)
class StrategyMetrics:
    arr: float
    ir: float
    mdd: float
    calmar: float

    @property
    def sharpe(self):
        # r_b = r_f, so the information ratio is the Sharpe ratio
        return self.ir

    def to_dict(self):
        return {k: (None if math.isnan(v) else v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class MetricsBundle:
    ic: float
    icir: float
    rank_ic: float
    rank_icir: float
    arr: float
    ir: float
    mdd: float
    calmar: float

    def __post_init__(self):
        for item in fields(self):
            object.__setattr__(self, item.name, float(getattr(self, item.name)))
        if self.mdd > 0:
            raise MetricsError("mdd is stored as a non-positive drawdown")

    @classmethod
    def keys(cls):
        return tuple(item.name for item in fields(cls))

    @classmethod
    def nan(cls):
        return cls(*([math.nan] * len(fields(cls))))

    @classmethod
    def combine(cls, predictive, strategy):
        return cls(
            ic=predictive["ic"],
            icir=predictive["icir"],
            rank_ic=predictive["rank_ic"],
            rank_icir=predictive["rank_icir"],
            arr=strategy.arr,
            ir=strategy.ir,
            mdd=strategy.mdd,
            calmar=strategy.calmar,
        )

    @property
    def sharpe(self):
        return self.ir

    def is_nan(self):
        return all(math.isnan(v) for v in astuple(self))

    def to_dict(self):
        """Flat JSON-ready mapping; NaN becomes None."""
        return {k: (None if math.isnan(v) else v) for k, v in zip(self.keys(), astuple(self))}

    @classmethod
    def from_dict(cls, payload):
        from .serializers import MetricsBundleSerializer

        serializer = MetricsBundleSerializer(data=payload)
        if not serializer.is_valid():
            raise MetricsError(f"invalid metrics payload: {serializer.errors}")
        data = serializer.validated_data
        return cls(**{k: (math.nan if data[k] is None else data[k]) for k in cls.keys()})


# -- correlations ------------------------------------------------------------------


def _paired(pred, real):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    real = np.asarray(real, dtype=np.float64).reshape(-1)
    if pred.shape != real.shape:
        raise MetricsError("prediction and realization cross-sections differ in length")
    keep = np.isfinite(pred) & np.isfinite(real)
    if keep.sum() < 2:
        raise InsufficientData("fewer than two paired observations")
    return pred[keep], real[keep]


def pearson(a, b):
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return math.nan
    da = a - a.mean()
    db = b - b.mean()
    return float((da @ db) / math.sqrt((da @ da) * (db @ db)))


def ic_daily(pred, real):
    return pearson(*_paired(pred, real))


def rank_ic_daily(pred, real):
    pred, real = _paired(pred, real)
    return pearson(rankdata(pred), rankdata(real))


def icir(series):
    values = series.values if isinstance(series, DailySeries) else np.asarray(series, dtype=float)
    values = values[~np.isnan(values)]
    if len(values) < 2:
        raise InsufficientData("ICIR needs at least two daily values")
    if np.ptp(values) == 0:
        return math.nan
    return float(values.mean() / values.std())


def column_pearson(x, y):
    """Pearson correlation per column over pairwise-finite rows; NaN where undefined."""
    valid = np.isfinite(x) & np.isfinite(y)
    count = valid.sum(axis=0)
    x = np.where(valid, x, 0.0)
    y = np.where(valid, y, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        mx = x.sum(axis=0) / count
        my = y.sum(axis=0) / count
        dx = np.where(valid, x - mx, 0.0)
        dy = np.where(valid, y - my, 0.0)
        r = (dx * dy).sum(axis=0) / np.sqrt((dx * dx).sum(axis=0) * (dy * dy).sum(axis=0))
    big = np.finfo(np.float64).max
    constant_x = np.where(valid, x, -big).max(axis=0) == np.where(valid, x, big).min(axis=0)
    constant_y = np.where(valid, y, -big).max(axis=0) == np.where(valid, y, big).min(axis=0)
    r[(count < 2) | constant_x | constant_y] = np.nan
    return r


def daily_ic_series(scores, returns, dates):
    """Per-date IC of N x T score and return grids; dates with < 2 pairs give NaN."""
    return DailySeries(dates, column_pearson(np.asarray(scores, float), np.asarray(returns, float)))


def daily_rank_ic_series(scores, returns, dates):
    scores = np.asarray(scores, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    out = np.full(scores.shape[1], np.nan)
    for t in range(scores.shape[1]):
        try:
            out[t] = rank_ic_daily(scores[:, t], returns[:, t])
        except InsufficientData:
            continue
    return DailySeries(dates, out)


def _safe_icir(series):
    try:
        return icir(series)
    except InsufficientData:
        return math.nan


def _nanmean(values):
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    return float(values.mean()) if len(values) else math.nan


def prediction_metrics(ic_series, rank_ic_series):
    return {
        "ic": _nanmean(ic_series.values),
        "icir": _safe_icir(ic_series),
        "rank_ic": _nanmean(rank_ic_series.values),
        "rank_icir": _safe_icir(rank_ic_series),
    }


# -- strategy ---------------------------------------------------------------------


def sharpe_ratio(returns, risk_free=0.0):
    values = returns.values if isinstance(returns, DailySeries) else np.asarray(returns, float)
    excess = values - risk_free
    if len(excess) == 0 or np.ptp(excess) == 0:
        return math.nan
    return float(excess.mean() / excess.std() * math.sqrt(TRADING_DAYS))


def max_drawdown(nav):
    """Largest peak-to-trough loss of a NAV path, as a value <= 0."""
    nav = np.asarray(nav, dtype=np.float64)
    peaks = np.maximum.accumulate(nav)
    return float(min(0.0, (nav / peaks - 1.0).min()))


def strategy_metrics(returns, risk_free=0.0):
    values = returns.values if isinstance(returns, DailySeries) else np.asarray(returns, float)
    if len(values) == 0:
        raise InsufficientData("strategy metrics need at least one daily return")
    if (values <= -1).any():
        raise InvalidReturn("a daily return of -100% or worse leaves nothing to compound")
    growth = np.prod(1.0 + values)
    arr = float(growth ** (TRADING_DAYS / len(values)) - 1.0)
    nav = np.concatenate([[1.0], np.cumprod(1.0 + values)])
    mdd = max_drawdown(nav)
    calmar = math.nan if mdd == 0 else arr / abs(mdd)
    return StrategyMetrics(arr=arr, ir=sharpe_ratio(values, risk_free), mdd=mdd, calmar=calmar)
