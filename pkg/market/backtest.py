"""
Daily top-k long-only strategy simulator.

Scores dated t drive trades on the next panel date. On each trading day the
simulator sells holdings that fell out of the target set, then buys the new
targets with equal shares of the available cash, all at that day's close.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from analytics.metrics import DailySeries, strategy_metrics

from .exceptions import EmptyCrossSection, IndexMismatch, InvalidConfig
from .panel import DATE_FORMAT

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StrategyConfig:
    topk: int = 50
    n_drop: int = 5
    buy_cost: float = 0.0005
    sell_cost: float = 0.0015
    min_fee: float = 5.0
    price_limit: Optional[float] = 0.095
    initial_cash: float = 1e8
    retention_rank: Optional[int] = None

    def __post_init__(self):
        if not (0 <= self.buy_cost < 1 and 0 <= self.sell_cost < 1):
            raise InvalidConfig("costs must lie in [0, 1)")
        if not self.topk > self.n_drop >= 0:
            raise InvalidConfig("need topk > n_drop >= 0")
        if not self.initial_cash > 0:
            raise InvalidConfig("initial_cash must be positive")
        if self.min_fee < 0:
            raise InvalidConfig("min_fee must be non-negative")
        if self.price_limit is not None and self.price_limit <= 0:
            raise InvalidConfig("price_limit must be positive or None")
        if self.retention_rank is not None and self.retention_rank < 1:
            raise InvalidConfig("retention_rank must be >= 1")

    @classmethod
    def nasdaq(cls, **overrides):
        """US preset: top 20, 0.1% per side, no daily price limit."""
        base = dict(topk=20, n_drop=5, buy_cost=0.001, sell_cost=0.001, min_fee=0.0, price_limit=None)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def preset(cls, name, **overrides):
        if name == "csi":
            return cls(**overrides)
        if name == "nasdaq":
            return cls.nasdaq(**overrides)
        raise InvalidConfig(f"unknown strategy preset {name!r}")

    @property
    def effective_retention_rank(self):
        return self.topk if self.retention_rank is None else self.retention_rank

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        from .serializers import StrategyConfigSerializer

        serializer = StrategyConfigSerializer(data=payload)
        if not serializer.is_valid():
            raise InvalidConfig(f"invalid strategy config: {serializer.errors}")
        return cls(**serializer.validated_data)


@dataclass(frozen=True)
class Trade:
    date: pd.Timestamp
    instrument: str
    side: str
    shares: float
    price: float
    fee: float

    def to_dict(self):
        data = asdict(self)
        data["date"] = self.date.strftime(DATE_FORMAT)
        return data


@dataclass(frozen=True, eq=False)
class BacktestReport:
    nav: DailySeries
    daily_returns: DailySeries
    positions: tuple
    cash: np.ndarray
    costs_paid: np.ndarray
    trades: tuple
    warnings: tuple = field(default=())

    def strategy_metrics(self, risk_free=0.0):
        return strategy_metrics(self.daily_returns, risk_free)

    def to_dict(self):
        dates = [d.strftime(DATE_FORMAT) for d in self.nav.dates]
        summary = {
            "initial_nav": float(self.nav.values[0]),
            "final_nav": float(self.nav.values[-1]),
            "n_trades": len(self.trades),
            "total_costs": float(np.sum(self.costs_paid)),
        }
        if len(self.daily_returns):
            summary.update(self.strategy_metrics().to_dict())
        return {
            "summary": summary,
            "dates": dates,
            "nav": [float(v) for v in self.nav.values],
            "cash": [float(v) for v in self.cash],
            "costs_paid": [float(v) for v in self.costs_paid],
            "daily_returns": [float(v) for v in self.daily_returns.values],
            "positions": [dict(p) for p in self.positions],
            "warnings": list(self.warnings),
        }

    def save_json(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, allow_nan=False, default=str))
        return path

    def trades_frame(self):
        columns = ["date", "instrument", "side", "shares", "price", "fee"]
        return pd.DataFrame([t.to_dict() for t in self.trades], columns=columns)

    def write_trades_csv(self, path):
        self.trades_frame().to_csv(path, index=False)
        return Path(path)


def _as_cross_section(scores_t):
    if isinstance(scores_t, pd.Series):
        return {str(k): float(v) for k, v in scores_t.items()}
    return {str(k): float(v) for k, v in dict(scores_t).items()}


def select_targets(scores_t, held, cfg):
    """Target set for one day, ordered by rank.

    Ranks run by score descending with ties broken by instrument id. The n_drop
    lowest-ranked held names (unscored ones count as lowest) are excluded, held
    names ranked within retention_rank are kept, and the remaining slots are
    filled with the best-ranked names not currently held.
    """
    scores_t = _as_cross_section(scores_t)
    scored = {k: v for k, v in scores_t.items() if not np.isnan(v)}
    if not scored:
        raise EmptyCrossSection("no scored instruments on this date")
    ranking = sorted(scored, key=lambda k: (-scored[k], k))
    rank = {name: position + 1 for position, name in enumerate(ranking)}
    unranked = len(ranking) + 1

    held_by_rank = sorted(held, key=lambda k: (rank.get(k, unranked), k))
    dropped = set(held_by_rank[max(0, len(held_by_rank) - cfg.n_drop) :]) if cfg.n_drop else set()
    retained = [
        name
        for name in held_by_rank
        if name not in dropped and rank.get(name, unranked) <= cfg.effective_retention_rank
    ][: cfg.topk]
    fills = [name for name in ranking if name not in held][: cfg.topk - len(retained)]
    return sorted(retained + fills, key=lambda k: (rank[k], k))


class _Book:
    """Cash, shares and last marks of a running backtest."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.cash = float(cfg.initial_cash)
        self.shares = {}
        self.marks = {}
        self.trades = []
        self.warnings = []

    def value(self):
        return self.cash + sum(q * self.marks[name] for name, q in self.shares.items())

    def sell(self, date, name, price):
        quantity = self.shares[name]
        proceeds = quantity * price
        fee = max(self.cfg.min_fee, proceeds * self.cfg.sell_cost)
        if fee > self.cash + proceeds:
            self.warnings.append(f"{date.strftime(DATE_FORMAT)}: fee exceeds cash, kept {name}")
            return 0.0
        self.cash += proceeds - fee
        del self.shares[name]
        self.trades.append(Trade(date, name, "sell", quantity, price, fee))
        return fee

    def buy(self, date, name, price, budget):
        rate, floor = self.cfg.buy_cost, self.cfg.min_fee
        notional = budget / (1.0 + rate)
        if notional * rate < floor:
            notional = budget - floor
        if notional <= 0:
            return 0.0
        fee = max(floor, notional * rate)
        quantity = notional / price
        self.cash -= notional + fee
        if self.cash < 0:
            # rounding residue of an all-cash buy
            self.cash = 0.0
        self.shares[name] = self.shares.get(name, 0.0) + quantity
        self.marks[name] = price
        self.trades.append(Trade(date, name, "buy", quantity, price, fee))
        return fee


def run_backtest(scores, panel, cfg, dates=None):
    """Simulate the strategy over a date range of the panel.

    The first date of the range is the signal date for the first trade and
    carries the base NAV point of initial_cash.
    """
    if scores.instruments != panel.instruments:
        raise IndexMismatch("scores are not indexed by the panel instruments")
    close = panel.field("close")
    mask = np.ones(len(panel.dates), dtype=bool) if dates is None else dates.mask(panel.dates)
    positions = np.flatnonzero(mask)
    score_column = {date: k for k, date in enumerate(scores.dates)}

    book = _Book(cfg)
    if len(positions) == 0:
        raise IndexMismatch("backtest range holds no panel dates")
    nav_dates = [panel.dates[positions[0]]]
    nav = [book.value()]
    cash = [book.cash]
    costs = [0.0]
    held_snapshots = [{}]

    index = {name: i for i, name in enumerate(panel.instruments)}
    for p in positions[1:]:
        date, signal_date = panel.dates[p], panel.dates[p - 1]
        today, previous = close[:, p], close[:, p - 1]

        for name in book.shares:
            price = today[index[name]]
            if np.isnan(price):
                book.warnings.append(
                    f"{date.strftime(DATE_FORMAT)}: missing close for {name}, carried at last price"
                )
            else:
                book.marks[name] = float(price)

        def tradable(name):
            price, before = today[index[name]], previous[index[name]]
            if np.isnan(price):
                return False
            if cfg.price_limit is not None and not np.isnan(before):
                return abs(price / before - 1.0) < cfg.price_limit
            return True

        column = score_column.get(signal_date)
        held = set(book.shares)
        targets = None
        if column is not None:
            cross_section = dict(zip(scores.instruments, scores.values[:, column]))
            try:
                targets = select_targets(cross_section, held, cfg)
            except EmptyCrossSection:
                targets = None

        paid = 0.0
        if targets is not None:
            target_set = set(targets)
            for name in sorted(held - target_set):
                if tradable(name):
                    paid += book.sell(date, name, float(today[index[name]]))
            buys = [name for name in targets if name not in book.shares and tradable(name)]
            if buys:
                budget = book.cash / len(buys)
                for name in buys:
                    paid += book.buy(date, name, float(today[index[name]]), budget)

        nav_dates.append(date)
        nav.append(book.value())
        cash.append(book.cash)
        costs.append(paid)
        held_snapshots.append(dict(book.shares))

    nav = np.asarray(nav)
    nav_series = DailySeries(pd.DatetimeIndex(nav_dates), nav)
    returns = DailySeries(pd.DatetimeIndex(nav_dates[1:]), nav[1:] / nav[:-1] - 1.0)
    logger.debug(
        "backtest over %d trading days: %d trades, final nav %.2f",
        len(returns),
        len(book.trades),
        nav[-1],
    )
    return BacktestReport(
        nav=nav_series,
        daily_returns=returns,
        positions=tuple(held_snapshots),
        cash=np.asarray(cash),
        costs_paid=np.asarray(costs),
        trades=tuple(book.trades),
        warnings=tuple(book.warnings),
    )
