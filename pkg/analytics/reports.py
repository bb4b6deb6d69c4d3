"""Tabular and file outputs built from metrics, backtests and loop records."""

import json
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

from .metrics import DailySeries, icir
from .exceptions import InsufficientData
from .serializers import AttemptCurvePointSerializer, YearlyICSerializer

logger = logging.getLogger(__name__)


def _none_if_nan(value):
    return None if value is None or math.isnan(value) else float(value)


def _year_stats(values):
    values = values[~np.isnan(values)]
    mean = float(values.mean()) if len(values) else math.nan
    try:
        ratio = icir(values)
    except InsufficientData:
        ratio = math.nan
    return mean, ratio


def yearly_ic_table(ic_series, rank_ic_series):
    """Per calendar year mean IC/RankIC and their ICIR."""
    frame = pd.DataFrame(
        {"ic": ic_series.values, "rank_ic": rank_ic_series.values}, index=ic_series.dates
    )
    rows = []
    for year, group in frame.groupby(frame.index.year):
        ic, ic_ir = _year_stats(group["ic"].to_numpy())
        rank_ic, rank_ir = _year_stats(group["rank_ic"].to_numpy())
        rows.append(
            {
                "year": int(year),
                "n_days": int(group["ic"].notna().sum()),
                "ic": _none_if_nan(ic),
                "icir": _none_if_nan(ic_ir),
                "rank_ic": _none_if_nan(rank_ic),
                "rank_icir": _none_if_nan(rank_ir),
            }
        )
    return YearlyICSerializer(rows, many=True).data


def nav_frame(report):
    returns = np.concatenate([[np.nan], report.daily_returns.values])
    return pd.DataFrame(
        {
            "date": report.nav.dates.strftime("%Y-%m-%d"),
            "nav": report.nav.values,
            "daily_return": returns,
            "cash": report.cash,
            "costs_paid": report.costs_paid,
        }
    )


def write_nav_csv(report, path):
    nav_frame(report).to_csv(path, index=False)
    return Path(path)


def attempt_curve(task_outcomes, max_k):
    """For k = 1..max_k, the share of tasks solved within k attempts.

    `task_outcomes` holds (attempts, success) per task.
    """
    outcomes = list(task_outcomes)
    points = []
    for k in range(1, max_k + 1):
        solved = sum(1 for attempts, success in outcomes if success and attempts <= k)
        share = solved / len(outcomes) if outcomes else 0.0
        points.append({"k": k, "solved_share": share})
    serializer = AttemptCurvePointSerializer(data=points, many=True)
    serializer.is_valid(raise_exception=True)
    return serializer.validated_data


def export_hypotheses(records, path):
    """One JSON line per hypothesis: id, action, text and the decision it led to."""
    path = Path(path)
    with path.open("w") as handle:
        for record in records:
            if record.hypothesis is None:
                continue
            line = {
                "iteration": record.iteration,
                "action": record.action,
                "hypothesis_id": record.hypothesis.hypothesis_id,
                "text": record.hypothesis.statement,
                "rationale": record.hypothesis.rationale,
                "decision": record.decision,
            }
            handle.write(json.dumps(line) + "\n")
    logger.debug("exported %d hypotheses to %s", len(records), path)
    return path


def series_points(series):
    if not isinstance(series, DailySeries):
        raise TypeError("expected a DailySeries")
    return [
        {"date": d.strftime("%Y-%m-%d"), "value": _none_if_nan(v)}
        for d, v in zip(series.dates, series.values)
    ]
