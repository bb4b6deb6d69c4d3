"""
Factor de-duplication and end-to-end experiment scoring.

A candidate factor is redundant when its time-averaged cross-sectional
correlation with some reference factor reaches the threshold. The comparison
is signed unless abs_dedup is set.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from analytics.exceptions import MetricsError
from analytics.metrics import (
    MetricsBundle,
    column_pearson,
    daily_ic_series,
    daily_rank_ic_series,
    prediction_metrics,
)

from market.backtest import run_backtest
from market.dsl import evaluate, parse, to_formula
from market.exceptions import EmptySampleSet, IndexMismatch, MarketError, SingularSystem
from market.library import dump_library
from market.panel import concat_features, prepare_factor
from market.predictor import build_design, predict, select_ridge

from .exceptions import ExperimentFailed, InvalidParameter

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LibraryEntry:
    name: str
    expr: object
    values: object
    provenance: str = "baseline"


@dataclass(frozen=True, eq=False)
class FactorLibrary:
    entries: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        names = self.names
        if len(set(names)) != len(names):
            raise IndexMismatch("factor library names must be unique")

    @property
    def names(self):
        return tuple(entry.name for entry in self.entries)

    def __len__(self):
        return len(self.entries)

    def values(self):
        return [entry.values for entry in self.entries]

    def extended(self, new_entries):
        return FactorLibrary(self.entries + tuple(new_entries))

    def to_dict(self):
        return [
            {"name": e.name, "formula": to_formula(e.expr), "provenance": e.provenance}
            for e in self.entries
        ]

    def save(self, path):
        """Factor library JSON plus a provenance sidecar next to it."""
        path = Path(path)
        dump_library([(e.name, e.expr) for e in self.entries], path)
        sidecar = path.with_name(path.stem + ".provenance.json")
        sidecar.write_text(json.dumps({e.name: e.provenance for e in self.entries}, indent=2))
        return path


class FeatureStore:
    """Evaluates formulas on the base panel and caches the prepared values."""

    def __init__(self, panel, pipeline_cfg):
        self.panel = panel
        self.pipeline_cfg = pipeline_cfg
        self._cache = {}

    def prepared(self, expr, name):
        key = to_formula(expr)
        if key not in self._cache:
            raw = evaluate(expr, self.panel, name, self.pipeline_cfg.window_ell)
            self._cache[key] = prepare_factor(raw, self.pipeline_cfg)
        return self._cache[key].renamed(name)

    def entry(self, name, formula, provenance):
        expr = parse(formula) if isinstance(formula, str) else formula
        return LibraryEntry(name, expr, self.prepared(expr, name), provenance)

    def feature_panel(self, entries):
        return concat_features(self.panel, [(e.name, e.values) for e in entries])


# -- dedup ------------------------------------------------------------------------


def _evaluable(values):
    """At least one date with two defined, not-all-equal values."""
    x = values.values
    finite = np.isfinite(x)
    big = np.finfo(np.float64).max
    spread = np.where(finite, x, -big).max(axis=0) - np.where(finite, x, big).min(axis=0)
    return bool(((finite.sum(axis=0) >= 2) & (spread > 0)).any())


def mean_correlation(a, b):
    """Average over dates of the cross-sectional Pearson correlation; NaN if no date qualifies."""
    daily = column_pearson(a.values, b.values)
    daily = daily[~np.isnan(daily)]
    return float(daily.mean()) if len(daily) else math.nan


def dedup(sota, candidates, threshold=0.99, abs_dedup=False, dedup_candidates=True):
    """Indices of the candidates that survive de-duplication, in input order."""
    if not 0 < threshold <= 1:
        raise InvalidParameter("threshold must lie in (0, 1]")
    references = sota.values() if isinstance(sota, FactorLibrary) else list(sota)
    grid = references[0] if references else (candidates[0] if candidates else None)
    for series in list(references) + list(candidates):
        if not series.aligned_with(grid):
            raise IndexMismatch("dedup inputs must share one (instrument, date) grid")

    kept = []
    for n, candidate in enumerate(candidates):
        if not _evaluable(candidate):
            logger.debug("candidate %s dropped: no evaluable date", candidate.name)
            continue
        pool = references + ([candidates[k] for k in kept] if dedup_candidates else [])
        ic_max = -math.inf
        for reference in pool:
            corr = mean_correlation(reference, candidate)
            if math.isnan(corr):
                continue
            ic_max = max(ic_max, abs(corr) if abs_dedup else corr)
        if ic_max >= threshold:
            logger.debug("candidate %s dropped: correlation %.4f", candidate.name, ic_max)
            continue
        kept.append(n)
    return kept


# -- experiment -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    metrics: MetricsBundle
    report: object
    kept_factors: tuple
    action: str
    model: object = None
    ic_series: object = None
    rank_ic_series: object = None
    extra: dict = field(default_factory=dict)


def evaluate_experiment(
    feature_names,
    model_spec,
    panel,
    labels,
    split,
    strategy_cfg,
    epsilon=1e-12,
    kept=(),
    action="factor",
):
    """Fit on train (ridge chosen on valid), score the test range and backtest it."""
    feature_names = tuple(feature_names)
    if not feature_names:
        raise ExperimentFailed("design", "no features to fit on")
    try:
        design = build_design(panel, feature_names, model_spec, epsilon)
    except MarketError as exc:
        raise ExperimentFailed("design", str(exc)) from exc

    try:
        selection = select_ridge(design, labels, split, model_spec.ridge_grid)
    except EmptySampleSet:
        raise
    except SingularSystem as exc:
        raise ExperimentFailed("fit", str(exc)) from exc

    scores = predict(selection.model, design, design.fields, split.test)
    test_mask = split.test.mask(panel.dates)
    realized = labels.raw[:, test_mask]
    ic = daily_ic_series(scores.values, realized, scores.dates)
    rank_ic = daily_rank_ic_series(scores.values, realized, scores.dates)

    try:
        report = run_backtest(scores, panel, strategy_cfg, split.test)
        metrics = MetricsBundle.combine(prediction_metrics(ic, rank_ic), report.strategy_metrics())
    except (MarketError, MetricsError) as exc:
        raise ExperimentFailed("backtest", str(exc)) from exc

    logger.debug(
        "experiment on %d features: ridge_lambda=%g ic=%.4f arr=%.4f",
        len(feature_names),
        selection.ridge_lambda,
        metrics.ic,
        metrics.arr,
    )
    return ExperimentResult(
        metrics=metrics,
        report=report,
        kept_factors=tuple(kept),
        action=action,
        model=selection.model,
        ic_series=ic,
        rank_ic_series=rank_ic,
        extra={"ridge_lambda": selection.ridge_lambda, "valid_mse": selection.valid_mse},
    )
