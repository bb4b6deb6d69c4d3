"""
Baseline predictor: ridge-regularized least squares over the factor fields.

Samples are (instrument, date) rows of the factor panel paired with the
cross-sectionally normalized label. The fit is the exact normal-equations
solution, so identical inputs always give identical weights.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg

from .exceptions import EmptySampleSet, IndexMismatch, InvalidConfig, ShapeMismatch, SingularSystem
from .panel import FactorValues, PanelTensor, cross_sectional_zscore

logger = logging.getLogger(__name__)

DEFAULT_RIDGE_LAMBDA = 1e-6
DEFAULT_RIDGE_GRID = (1e-6, 1e-4, 1e-2, 1.0)
FEATURE_TRANSFORMS = ("none", "zscore")
LAG_SEPARATOR = "@lag"


# -- splits ------------------------------------------------------------------------


@dataclass(frozen=True)
class DateRange:
    start: pd.Timestamp
    end: pd.Timestamp

    def __post_init__(self):
        object.__setattr__(self, "start", pd.Timestamp(self.start))
        object.__setattr__(self, "end", pd.Timestamp(self.end))
        if self.end < self.start:
            raise InvalidConfig(f"date range ends ({self.end}) before it starts ({self.start})")

    def mask(self, dates):
        dates = pd.DatetimeIndex(dates)
        return np.asarray((dates >= self.start) & (dates <= self.end))

    def to_dict(self):
        return {"start": self.start.strftime("%Y-%m-%d"), "end": self.end.strftime("%Y-%m-%d")}


@dataclass(frozen=True)
class SplitSpec:
    train: DateRange
    valid: DateRange
    test: DateRange

    def __post_init__(self):
        if not (
            self.train.end < self.valid.start <= self.valid.end < self.test.start
        ):
            raise InvalidConfig("train, valid and test ranges must be ordered and disjoint")

    def to_dict(self):
        return {
            "train": self.train.to_dict(),
            "valid": self.valid.to_dict(),
            "test": self.test.to_dict(),
        }


def split_by_fraction(dates, train_fraction=0.6, valid_fraction=0.2):
    """Contiguous walk-forward split of a date grid; the test range takes the rest."""
    dates = pd.DatetimeIndex(dates)
    if not (0 < train_fraction < 1 and 0 < valid_fraction < 1 and train_fraction + valid_fraction < 1):
        raise InvalidConfig("train and valid fractions must be positive and sum below 1")
    n = len(dates)
    n_train = int(n * train_fraction)
    n_valid = int(n * valid_fraction)
    if n_train < 1 or n_valid < 1 or n - n_train - n_valid < 1:
        raise InvalidConfig(f"{n} dates are too few for a three-way split")
    return SplitSpec(
        DateRange(dates[0], dates[n_train - 1]),
        DateRange(dates[n_train], dates[n_train + n_valid - 1]),
        DateRange(dates[n_train + n_valid], dates[-1]),
    )


# -- samples -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SampleSet:
    features: np.ndarray
    targets: np.ndarray
    keys: tuple
    feature_names: tuple

    def __post_init__(self):
        for name in ("features", "targets"):
            array = np.array(getattr(self, name), dtype=np.float64)
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    def __len__(self):
        return len(self.targets)


def _feature_block(panel, factors, mask):
    index = [panel.field_index(name) for name in factors]
    return panel.values[:, mask, :][:, :, index]


def _label_mask(date_range, dates, horizon_tau):
    """Dates of the range whose label is realized within the range.

    A label dated t reads the close at t + horizon_tau; when that date is a
    later panel date outside the range, the sample would see the next range.
    """
    mask = np.array(date_range.mask(dates), dtype=bool)
    positions = np.flatnonzero(mask)
    if positions.size:
        realized = positions + horizon_tau
        outside = (realized > positions[-1]) & (realized < len(dates))
        mask[positions[outside]] = False
    return mask


def assemble_samples(panel, factors, labels, date_range):
    if tuple(labels.instruments) != panel.instruments or not labels.dates.equals(panel.dates):
        raise IndexMismatch("labels are not indexed by the panel grid")
    mask = _label_mask(date_range, panel.dates, labels.horizon_tau)
    block = _feature_block(panel, factors, mask)
    n, t, k = block.shape
    # date-major, instrument-minor
    x = block.transpose(1, 0, 2).reshape(t * n, k)
    y = labels.normalized[:, mask].T.reshape(t * n)
    keep = np.isfinite(x).all(axis=1) & np.isfinite(y)
    if not keep.any():
        raise EmptySampleSet(
            f"no complete samples between {date_range.start.date()} and {date_range.end.date()}"
        )
    dates = panel.dates[mask]
    keys = tuple(
        (panel.instruments[row % n], dates[row // n]) for row in np.flatnonzero(keep)
    )
    return SampleSet(x[keep], y[keep], keys, tuple(factors))


# -- model -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearModel:
    feature_names: tuple
    coef: np.ndarray
    intercept: float
    ridge_lambda: float

    def __post_init__(self):
        coef = np.array(self.coef, dtype=np.float64).reshape(-1)
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "intercept", float(self.intercept))
        if len(coef) != len(self.feature_names):
            raise ShapeMismatch("one coefficient per feature is required")
        if not (np.isfinite(coef).all() and np.isfinite(self.intercept)):
            raise SingularSystem("fitted weights are not finite")

    @property
    def weights(self):
        """Coefficients followed by the intercept."""
        return np.append(self.coef, self.intercept)

    def to_dict(self):
        return {
            "feature_names": list(self.feature_names),
            "weights": [float(w) for w in self.coef],
            "intercept": self.intercept,
            "ridge_lambda": float(self.ridge_lambda),
        }

    @classmethod
    def from_dict(cls, payload):
        from .serializers import LinearModelSerializer

        serializer = LinearModelSerializer(data=payload)
        if not serializer.is_valid():
            raise ShapeMismatch(f"invalid model payload: {serializer.errors}")
        data = serializer.validated_data
        return cls(data["feature_names"], data["weights"], data["intercept"], data["ridge_lambda"])

    def save(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit(train, ridge_lambda=DEFAULT_RIDGE_LAMBDA):
    """Minimize mean((Xw + b - y)^2) + ridge_lambda * |w|^2 with b unpenalized."""
    if ridge_lambda < 0:
        raise InvalidConfig("ridge_lambda must be non-negative")
    n, k = train.features.shape
    if n == 0:
        raise EmptySampleSet("cannot fit on an empty sample set")
    design = np.hstack([train.features, np.ones((n, 1))])
    if ridge_lambda == 0 and np.linalg.matrix_rank(design) < k + 1:
        raise SingularSystem("normal matrix is rank deficient; retry with ridge_lambda > 0")
    penalty = np.full(k + 1, float(ridge_lambda))
    penalty[-1] = 0.0
    normal = design.T @ design / n + np.diag(penalty)
    rhs = design.T @ train.targets / n
    try:
        theta = linalg.solve(normal, rhs, assume_a="sym")
    except linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None
    return LinearModel(train.feature_names, theta[:-1], theta[-1], ridge_lambda)


def mse(model, samples):
    residual = samples.features @ model.coef + model.intercept - samples.targets
    return float(np.mean(residual * residual))


def predict(model, panel, factors, dates=None):
    """Score every (instrument, date) cell; rows with a NaN feature score NaN."""
    factors = tuple(factors)
    if len(factors) != len(model.feature_names):
        raise ShapeMismatch(
            f"model has {len(model.feature_names)} features, {len(factors)} were given"
        )
    mask = np.ones(len(panel.dates), dtype=bool) if dates is None else dates.mask(panel.dates)
    block = _feature_block(panel, factors, mask)
    incomplete = ~np.isfinite(block).all(axis=2)
    scores = np.where(incomplete[:, :, None], 0.0, block) @ model.coef + model.intercept
    scores[incomplete] = np.nan
    return FactorValues(panel.instruments, panel.dates[mask], scores, "score")


# -- model spec / design matrix ------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    feature_transform: str = "none"
    ridge_grid: tuple = field(default=DEFAULT_RIDGE_GRID)
    lookback: int = 1

    def __post_init__(self):
        object.__setattr__(self, "ridge_grid", tuple(float(v) for v in self.ridge_grid))
        if self.feature_transform not in FEATURE_TRANSFORMS:
            raise InvalidConfig(f"feature_transform must be one of {FEATURE_TRANSFORMS}")
        if not self.ridge_grid or any(v < 0 for v in self.ridge_grid):
            raise InvalidConfig("ridge_grid must be a non-empty list of non-negative values")
        if int(self.lookback) != self.lookback or self.lookback < 1:
            raise InvalidConfig("lookback must be an integer >= 1")

    def to_dict(self):
        data = asdict(self)
        data["ridge_grid"] = list(self.ridge_grid)
        return data

    @classmethod
    def from_dict(cls, payload):
        from .serializers import ModelSpecSerializer

        serializer = ModelSpecSerializer(data=payload)
        if not serializer.is_valid():
            raise InvalidConfig(f"invalid model spec: {serializer.errors}")
        return cls(**serializer.validated_data)


def build_design(panel, factors, spec, epsilon=1e-12):
    """Design panel: each factor plus lookback-1 lagged copies, optionally z-scored per date."""
    names, columns = [], []
    for name in factors:
        x = panel.field(name)
        for lag in range(spec.lookback):
            shifted = np.full_like(x, np.nan)
            if lag == 0:
                shifted = np.array(x)
            elif lag < x.shape[1]:
                shifted[:, lag:] = x[:, :-lag]
            if spec.feature_transform == "zscore":
                shifted = cross_sectional_zscore(shifted, epsilon)
            names.append(name if lag == 0 else f"{name}{LAG_SEPARATOR}{lag}")
            columns.append(shifted)
    n, t = len(panel.instruments), len(panel.dates)
    values = np.stack(columns, axis=2) if columns else np.empty((n, t, 0))
    return PanelTensor(panel.instruments, panel.dates, tuple(names), values)


@dataclass(frozen=True)
class RidgeSelection:
    ridge_lambda: float
    model: LinearModel
    valid_mse: dict


def select_ridge(design, labels, split, grid):
    """Fit on train for every grid value; keep the lowest validation MSE (first on ties)."""
    train = assemble_samples(design, design.fields, labels, split.train)
    valid = assemble_samples(design, design.fields, labels, split.valid)
    best = None
    scores = {}
    for ridge_lambda in grid:
        try:
            model = fit(train, ridge_lambda)
        except SingularSystem:
            logger.debug("ridge_lambda=%g gave a singular system", ridge_lambda)
            continue
        scores[ridge_lambda] = mse(model, valid)
        if best is None or scores[ridge_lambda] < scores[best.ridge_lambda]:
            best = RidgeSelection(ridge_lambda, model, scores)
    if best is None:
        raise SingularSystem("every ridge_lambda in the grid gave a singular system")
    return RidgeSelection(best.ridge_lambda, best.model, scores)
