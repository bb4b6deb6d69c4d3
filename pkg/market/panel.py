"""
Dual-indexed (instrument, date) market panel and its data pipeline.

A panel is a dense N x T x P float64 tensor. Missing cells are NaN. Every
transform returns a new panel; the array of a constructed panel is read-only.
"""

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .exceptions import (
    DuplicateKey,
    EmptyInput,
    FieldNotFound,
    IndexMismatch,
    InvalidConfig,
    InvalidPrice,
    ParseError,
)

logger = logging.getLogger(__name__)

KEY_COLUMNS = ("datetime", "instrument")
BASE_FIELDS = ("open", "high", "low", "close", "volume")
PRICE_FIELDS = ("open", "high", "low", "close")
RAW_PREFIX = "raw_"
DATE_FORMAT = "%Y-%m-%d"


@dataclass(frozen=True)
class PipelineConfig:
    epsilon: float = 1e-12
    horizon_tau: int = 1
    window_ell: int = 60

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidConfig("epsilon must be positive")
        if int(self.horizon_tau) != self.horizon_tau or self.horizon_tau < 1:
            raise InvalidConfig("horizon_tau must be an integer >= 1")
        if int(self.window_ell) != self.window_ell or self.window_ell < 1:
            raise InvalidConfig("window_ell must be an integer >= 1")


def _readonly(array):
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PanelTensor:
    instruments: tuple
    dates: pd.DatetimeIndex
    fields: tuple
    values: np.ndarray

    def __post_init__(self):
        instruments = tuple(str(i) for i in self.instruments)
        dates = pd.DatetimeIndex(self.dates)
        fields = tuple(str(f) for f in self.fields)
        values = _readonly(self.values)

        if len(set(instruments)) != len(instruments):
            raise InvalidConfig("instrument ids must be unique")
        if len(set(fields)) != len(fields):
            raise InvalidConfig("field names must be unique")
        if len(dates) > 1 and not (dates[1:] > dates[:-1]).all():
            raise InvalidConfig("dates must be strictly increasing")
        expected = (len(instruments), len(dates), len(fields))
        if values.shape != expected:
            raise InvalidConfig(f"values have shape {values.shape}, expected {expected}")

        object.__setattr__(self, "instruments", instruments)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    def has_field(self, name):
        return name in self.fields

    def field_index(self, name):
        try:
            return self.fields.index(name)
        except ValueError:
            raise FieldNotFound(name) from None

    def field(self, name):
        """N x T view of one field."""
        return self.values[:, :, self.field_index(name)]

    def date_position(self, date):
        position = self.dates.get_indexer([pd.Timestamp(date)])[0]
        if position < 0:
            raise IndexMismatch(f"date {date} is not on the panel grid")
        return int(position)

    def with_field(self, name, data):
        """Return a panel with `name` replaced (or appended) by an N x T array."""
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.values.shape[:2]:
            raise IndexMismatch(
                f"series for {name!r} has shape {data.shape}, panel grid is {self.values.shape[:2]}"
            )
        if name in self.fields:
            values = np.array(self.values)
            values[:, :, self.fields.index(name)] = data
            return PanelTensor(self.instruments, self.dates, self.fields, values)
        values = np.concatenate([self.values, data[:, :, None]], axis=2)
        return PanelTensor(self.instruments, self.dates, self.fields + (name,), values)

    def select_fields(self, names):
        index = [self.field_index(name) for name in names]
        return PanelTensor(self.instruments, self.dates, tuple(names), self.values[:, :, index])

    def restrict_dates(self, start=None, end=None):
        mask = np.ones(len(self.dates), dtype=bool)
        if start is not None:
            mask &= self.dates >= pd.Timestamp(start)
        if end is not None:
            mask &= self.dates <= pd.Timestamp(end)
        return PanelTensor(self.instruments, self.dates[mask], self.fields, self.values[:, mask, :])

    def grid_matches(self, other):
        return self.instruments == other.instruments and self.dates.equals(other.dates)

    def equals(self, other):
        return (
            self.grid_matches(other)
            and self.fields == other.fields
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    def validate_prices(self):
        for name in PRICE_FIELDS:
            if name not in self.fields:
                continue
            column = self.field(name)
            present = column[~np.isnan(column)]
            if (present <= 0).any():
                raise InvalidPrice(f"field {name!r} holds non-positive prices")
        return self


@dataclass(frozen=True, eq=False)
class FactorValues:
    """One (instrument, date)-indexed series, NaN where undefined."""

    instruments: tuple
    dates: pd.DatetimeIndex
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        instruments = tuple(str(i) for i in self.instruments)
        dates = pd.DatetimeIndex(self.dates)
        values = _readonly(self.values)
        if values.shape != (len(instruments), len(dates)):
            raise IndexMismatch(
                f"values have shape {values.shape}, grid is {(len(instruments), len(dates))}"
            )
        object.__setattr__(self, "instruments", instruments)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_panel_field(cls, panel, field, name=None):
        return cls(panel.instruments, panel.dates, panel.field(field), name or field)

    def aligned_with(self, grid):
        return self.instruments == tuple(grid.instruments) and self.dates.equals(grid.dates)

    def renamed(self, name):
        return FactorValues(self.instruments, self.dates, self.values, name)

    def restrict_dates(self, start=None, end=None):
        mask = np.ones(len(self.dates), dtype=bool)
        if start is not None:
            mask &= self.dates >= pd.Timestamp(start)
        if end is not None:
            mask &= self.dates <= pd.Timestamp(end)
        return FactorValues(self.instruments, self.dates[mask], self.values[:, mask], self.name)

    def nan_equal(self, other):
        return self.aligned_with(other) and np.array_equal(self.values, other.values, equal_nan=True)

    def to_frame(self):
        """Long format: one row per (datetime, instrument)."""
        index = pd.MultiIndex.from_product(
            [self.dates, list(self.instruments)], names=list(KEY_COLUMNS)
        )
        return pd.DataFrame({self.name or "value": self.values.T.reshape(-1)}, index=index)


@dataclass(frozen=True, eq=False)
class LabelPanel:
    instruments: tuple
    dates: pd.DatetimeIndex
    raw: np.ndarray
    normalized: np.ndarray
    horizon_tau: int

    def __post_init__(self):
        object.__setattr__(self, "raw", _readonly(self.raw))
        object.__setattr__(self, "normalized", _readonly(self.normalized))
        object.__setattr__(self, "dates", pd.DatetimeIndex(self.dates))
        object.__setattr__(self, "instruments", tuple(self.instruments))

    def raw_values(self):
        return FactorValues(self.instruments, self.dates, self.raw, "label_raw")

    def normalized_values(self):
        return FactorValues(self.instruments, self.dates, self.normalized, "label")


@dataclass(frozen=True)
class PlantedSignal:
    formula: str
    window: int
    description: str


PLANTED_SIGNAL = PlantedSignal(
    formula="$close/Ref($close, 10) - 1",
    window=10,
    description=(
        "next-day idiosyncratic return loads on the cross-sectional z-score "
        "of the trailing 10-day price momentum"
    ),
)


# -- ingestion / export -------------------------------------------------------


def _parse_numbers(raw, column):
    out = np.full(len(raw), np.nan)
    for position, text in enumerate(raw):
        text = text.strip()
        if text == "" or text.lower() == "nan":
            continue
        try:
            out[position] = float(text)
        except ValueError:
            # line 1 is the header
            raise ParseError(row=position + 2, column=column, raw=text) from None
    return out


def load_panel(path, schema=None):
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise EmptyInput(f"{path} is empty") from None
    if frame.empty:
        raise EmptyInput(f"{path} has no data rows")

    for column in KEY_COLUMNS:
        if column not in frame.columns:
            raise FieldNotFound(column)
    fields = list(schema) if schema else [c for c in frame.columns if c not in KEY_COLUMNS]
    for name in fields:
        if name not in frame.columns:
            raise FieldNotFound(name)

    dates = pd.to_datetime(frame["datetime"].str.strip(), format=DATE_FORMAT, errors="coerce")
    if dates.isna().any():
        position = int(np.flatnonzero(dates.isna().to_numpy())[0])
        raise ParseError(row=position + 2, column="datetime", raw=frame["datetime"].iloc[position])
    instruments = frame["instrument"].str.strip()

    keys = pd.DataFrame({"datetime": dates, "instrument": instruments})
    duplicated = keys.duplicated()
    if duplicated.any():
        position = int(np.flatnonzero(duplicated.to_numpy())[0])
        raise DuplicateKey(keys["datetime"].iloc[position].strftime(DATE_FORMAT), instruments.iloc[position])

    numbers = np.column_stack([_parse_numbers(frame[name].tolist(), name) for name in fields])

    instrument_index = pd.Index(sorted(instruments.unique()))
    date_index = pd.DatetimeIndex(sorted(dates.unique()))
    values = np.full((len(instrument_index), len(date_index), len(fields)), np.nan)
    values[instrument_index.get_indexer(instruments), date_index.get_indexer(dates), :] = numbers

    panel = PanelTensor(tuple(instrument_index), date_index, tuple(fields), values)
    logger.debug("loaded panel %s with shape %s", path, panel.shape)
    return panel.validate_prices()


def write_panel(panel, path):
    """Write the panel as CSV rows sorted by (datetime, instrument).

    Rows whose fields are all NaN are omitted so absent rows stay absent.
    """
    n, t, p = panel.shape
    flat = panel.values.transpose(1, 0, 2).reshape(t * n, p)
    keep = ~np.isnan(flat).all(axis=1)
    frame = pd.DataFrame(
        {
            "datetime": np.repeat(panel.dates.strftime(DATE_FORMAT).to_numpy(), n)[keep],
            "instrument": np.tile(np.array(panel.instruments, dtype=object), t)[keep],
        }
    )
    for k, name in enumerate(panel.fields):
        column = flat[keep, k]
        frame[name] = ["" if np.isnan(v) else repr(float(v)) for v in column]
    frame.to_csv(path, index=False)
    return Path(path)


# -- synthetic data -----------------------------------------------------------


def planted_scores(close, window=PLANTED_SIGNAL.window):
    """Cross-sectional z-score of trailing `window`-day momentum, N x T."""
    close = np.asarray(close, dtype=np.float64)
    momentum = np.full_like(close, np.nan)
    momentum[:, window:] = close[:, window:] / close[:, :-window] - 1.0
    return _zscore_columns(momentum)


def _zscore_columns(matrix):
    out = np.full_like(matrix, np.nan)
    for t in range(matrix.shape[1]):
        column = matrix[:, t]
        present = ~np.isnan(column)
        if not present.any():
            continue
        values = column[present]
        std = values.std()
        out[present, t] = 0.0 if std == 0 else (values - values.mean()) / std
    return out


def gen_synthetic(n_instruments, n_dates, seed, signal_strength, start="2020-01-01"):
    """Geometric random walk panel with a planted cross-sectional momentum signal."""
    if n_instruments < 2:
        raise InvalidConfig("n_instruments must be at least 2")
    if n_dates < 10:
        raise InvalidConfig("n_dates must be at least 10")
    if not 0.0 <= signal_strength <= 1.0:
        raise InvalidConfig("signal_strength must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    n, t_len = n_instruments, n_dates
    window = PLANTED_SIGNAL.window
    noise_loading = np.sqrt(1.0 - signal_strength**2)

    start_price = rng.uniform(10.0, 100.0, n)
    market = rng.normal(0.0003, 0.008, t_len)
    shocks = rng.standard_normal((n, t_len))
    gaps = rng.normal(0.0, 0.003, (n, t_len))
    wicks = np.abs(rng.normal(0.0, 0.006, (2, n, t_len)))
    log_volume = rng.normal(13.0, 0.4, (n, t_len))

    close = np.empty((n, t_len))
    returns = np.zeros((n, t_len))
    close[:, 0] = start_price
    for t in range(1, t_len):
        idiosyncratic = shocks[:, t]
        if t - 1 >= window:
            momentum = close[:, t - 1] / close[:, t - 1 - window] - 1.0
            std = momentum.std()
            score = np.zeros(n) if std == 0 else (momentum - momentum.mean()) / std
            idiosyncratic = signal_strength * score + noise_loading * shocks[:, t]
        returns[:, t] = np.clip(market[t] + 0.015 * idiosyncratic, -0.2, 0.2)
        close[:, t] = close[:, t - 1] * (1.0 + returns[:, t])

    previous_close = np.concatenate([start_price[:, None], close[:, :-1]], axis=1)
    open_ = previous_close * (1.0 + gaps)
    high = np.maximum(open_, close) * (1.0 + wicks[0])
    low = np.minimum(open_, close) * (1.0 - np.minimum(wicks[1], 0.5))
    volume = np.exp(log_volume) * (1.0 + 5.0 * np.abs(returns))

    values = np.stack([open_, high, low, close, volume], axis=2)
    instruments = tuple(f"SYN{i:04d}" for i in range(n))
    dates = pd.bdate_range(start=start, periods=t_len)
    logger.debug("generated synthetic panel n=%d t=%d seed=%s", n, t_len, seed)
    return PanelTensor(instruments, dates, BASE_FIELDS, values).validate_prices()


# -- preprocessing ------------------------------------------------------------


def robust_zscore(panel, field, cfg):
    """Per-date (x - median) / (MAD + eps) over instruments; original kept as raw_<field>."""
    x = panel.field(field)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        median = np.nanmedian(x, axis=0)
        mad = np.nanmedian(np.abs(x - median), axis=0)
    normalized = (x - median) / (mad + cfg.epsilon)
    return panel.with_field(RAW_PREFIX + field, x).with_field(field, normalized)


def impute(panel):
    """Forward fill, then the date's cross-sectional mean, in one pass over dates."""
    values = np.array(panel.values)
    for t in range(values.shape[1]):
        current = values[:, t, :]
        if t > 0:
            previous = values[:, t - 1, :]
            fill = np.isnan(current) & ~np.isnan(previous)
            current[fill] = previous[fill]
        missing = np.isnan(current)
        if missing.any():
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                means = np.nanmean(current, axis=0)
            current[missing] = np.broadcast_to(means, current.shape)[missing]
    return PanelTensor(panel.instruments, panel.dates, panel.fields, values)


def cross_sectional_zscore(matrix, epsilon):
    """Per-date (y - mean) / (population std + eps) over non-NaN entries."""
    matrix = np.asarray(matrix, dtype=np.float64)
    present = ~np.isnan(matrix)
    count = present.sum(axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(matrix, axis=0)
        std = np.sqrt(np.nanmean((matrix - mean) ** 2, axis=0))
    out = (matrix - mean) / (std + epsilon)
    out[:, count == 0] = np.nan
    return out


def compute_labels(panel, cfg):
    close = panel.field("close")
    present = close[~np.isnan(close)]
    if (present <= 0).any():
        raise InvalidPrice("close prices must be strictly positive")
    tau = cfg.horizon_tau
    raw = np.full_like(close, np.nan)
    if tau < close.shape[1]:
        raw[:, :-tau] = (close[:, tau:] - close[:, :-tau]) / close[:, :-tau]
    normalized = cross_sectional_zscore(raw, cfg.epsilon)
    return LabelPanel(panel.instruments, panel.dates, raw, normalized, tau)


def _free_name(name, taken):
    if name not in taken:
        return name
    k = 1
    while f"{name}__{k}" in taken:
        k += 1
    return f"{name}__{k}"


def concat_features(panel, new_factors):
    """Append (name, FactorValues) pairs as fields; collisions get the smallest free __k suffix."""
    if not new_factors:
        return panel
    taken = set(panel.fields)
    names, columns = [], []
    for name, series in new_factors:
        if not series.aligned_with(panel):
            raise IndexMismatch(f"factor {name!r} is not indexed by the panel grid")
        final = _free_name(name, taken)
        taken.add(final)
        names.append(final)
        columns.append(series.values)
    values = np.concatenate([panel.values, np.stack(columns, axis=2)], axis=2)
    return PanelTensor(panel.instruments, panel.dates, panel.fields + tuple(names), values)


def prepare_factor(values, cfg):
    """Robust z-score then impute a single generated factor."""
    scratch = PanelTensor(values.instruments, values.dates, ("factor",), values.values[:, :, None])
    scratch = impute(robust_zscore(scratch, "factor", cfg))
    return FactorValues(values.instruments, values.dates, scratch.field("factor"), values.name)
