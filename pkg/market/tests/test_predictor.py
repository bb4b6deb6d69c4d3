import numpy as np
import pandas as pd
import pytest

from market.dsl import evaluate, parse
from market.exceptions import EmptySampleSet, InvalidConfig, ShapeMismatch, SingularSystem
from market.panel import LabelPanel, PanelTensor, compute_labels, concat_features, prepare_factor
from market.predictor import (
    DateRange,
    LinearModel,
    ModelSpec,
    SampleSet,
    assemble_samples,
    build_design,
    fit,
    mse,
    predict,
    select_ridge,
    split_by_fraction,
)

FACTORS = {
    "MOM10": "$close/Ref($close, 10) - 1",
    "KLEN": "($high - $low)/$open",
    "STD5": "Std($close, 5)/$close",
}
LABELS = [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]


def factor_panel(panel, pipeline_cfg):
    prepared = [
        (name, prepare_factor(evaluate(parse(formula), panel, name), pipeline_cfg))
        for name, formula in FACTORS.items()
    ]
    return concat_features(panel, prepared)


def tiny_grid(values, labels):
    values = np.asarray(values, dtype=np.float64)
    n, t = values.shape
    instruments = ("A", "B")[:n]
    dates = pd.bdate_range("2021-01-04", periods=t)
    panel = PanelTensor(instruments, dates, ("f",), values[:, :, None])
    labels = np.asarray(labels, dtype=np.float64)
    return panel, LabelPanel(instruments, dates, labels, labels, 1)


def random_samples(rng, n=200, k=3):
    features = rng.standard_normal((n, k))
    return features, tuple(f"x{i}" for i in range(k))


def test_split_by_fraction():
    dates = pd.bdate_range("2020-01-01", periods=100)
    split = split_by_fraction(dates, 0.6, 0.2)

    assert split.train.mask(dates).sum() == 60
    assert split.valid.mask(dates).sum() == 20
    assert split.test.mask(dates).sum() == 20
    assert split.train.end < split.valid.start


def test_split_by_fraction_rejects_bad_fractions():
    dates = pd.bdate_range("2020-01-01", periods=100)

    with pytest.raises(InvalidConfig):
        split_by_fraction(dates, 0.8, 0.3)
    with pytest.raises(InvalidConfig):
        split_by_fraction(dates[:3], 0.5, 0.2)


def test_assemble_samples_counts():
    panel, labels = tiny_grid([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], LABELS)
    everything = DateRange(panel.dates[0], panel.dates[-1])

    samples = assemble_samples(panel, ["f"], labels, everything)

    assert len(samples) == 6
    # date-major, instrument-minor
    assert samples.keys[:2] == (("A", panel.dates[0]), ("B", panel.dates[0]))


def test_assemble_samples_drops_nan_rows():
    panel, labels = tiny_grid([[1.0, np.nan, 3.0], [4.0, 5.0, 6.0]], LABELS)
    everything = DateRange(panel.dates[0], panel.dates[-1])

    assert len(assemble_samples(panel, ["f"], labels, everything)) == 5


def test_assemble_samples_without_labels():
    last_unlabelled = [[0.1, 0.2, np.nan], [0.4, 0.5, np.nan]]
    panel, labels = tiny_grid([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], last_unlabelled)
    last = DateRange(panel.dates[-1], panel.dates[-1])

    with pytest.raises(EmptySampleSet):
        assemble_samples(panel, ["f"], labels, last)


def test_fit_recovers_exact_linear_target():
    rng = np.random.default_rng(0)
    features, names = random_samples(rng)
    targets = 2.0 * features[:, 0] + 1.0

    model = fit(SampleSet(features, targets, (), names), ridge_lambda=0.0)

    np.testing.assert_allclose(model.coef, [2.0, 0.0, 0.0], atol=1e-9)
    assert model.intercept == pytest.approx(1.0, abs=1e-9)


def test_fit_duplicate_columns_is_singular():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(50)
    features = np.column_stack([x, x])

    with pytest.raises(SingularSystem):
        fit(SampleSet(features, x, (), ("a", "b")), ridge_lambda=0.0)


def test_fit_large_ridge_shrinks_to_mean():
    rng = np.random.default_rng(2)
    features, names = random_samples(rng)
    targets = features @ np.array([0.5, -1.0, 2.0]) + 3.0 + rng.standard_normal(200)

    model = fit(SampleSet(features, targets, (), names), ridge_lambda=1e10)

    np.testing.assert_allclose(model.coef, 0.0, atol=1e-6)
    assert model.intercept == pytest.approx(targets.mean(), abs=1e-6)


def test_fit_is_optimal_and_stationary():
    rng = np.random.default_rng(3)
    features, names = random_samples(rng, n=300, k=4)
    targets = features @ rng.standard_normal(4) + rng.standard_normal(300)
    samples = SampleSet(features, targets, (), names)

    model = fit(samples, ridge_lambda=0.0)
    best = mse(model, samples)

    assert best <= mse(LinearModel(names, np.zeros(4), 0.0, 0.0), samples)
    for _ in range(100):
        other = LinearModel(names, rng.standard_normal(4), rng.standard_normal(), 0.0)
        assert best <= mse(other, samples)

    design = np.hstack([features, np.ones((300, 1))])
    gradient = 2.0 * design.T @ (design @ model.weights - targets) / 300
    assert np.abs(gradient).max() < 1e-8


def test_fit_rejects_negative_ridge():
    features, names = random_samples(np.random.default_rng(4))

    with pytest.raises(InvalidConfig):
        fit(SampleSet(features, features[:, 0], (), names), ridge_lambda=-1.0)


def test_predict_zero_model_and_nan_rows():
    panel, _ = tiny_grid([[1.0, np.nan, 3.0], [4.0, 5.0, 6.0]], [[0.0] * 3, [0.0] * 3])
    model = LinearModel(("f",), [0.0], 0.0, 0.0)

    scores = predict(model, panel, ["f"]).values

    assert np.isnan(scores[0, 1])
    assert np.count_nonzero(np.isnan(scores)) == 1
    assert (scores[~np.isnan(scores)] == 0.0).all()


def test_predict_feature_count_mismatch():
    panel, _ = tiny_grid([[1.0, 2.0]], [[0.0, 0.0]])
    model = LinearModel(("f", "g"), [1.0, 1.0], 0.0, 0.0)

    with pytest.raises(ShapeMismatch):
        predict(model, panel, ["f"])


def test_refit_gives_identical_predictions(small_panel, pipeline_cfg):
    features = factor_panel(small_panel, pipeline_cfg)
    labels = compute_labels(small_panel, pipeline_cfg)
    split = split_by_fraction(small_panel.dates)
    names = list(FACTORS)

    first = select_ridge(features.select_fields(names), labels, split, (1e-6, 1e-2))
    second = select_ridge(features.select_fields(names), labels, split, (1e-6, 1e-2))

    a = predict(first.model, features, names, split.test).values
    b = predict(second.model, features, names, split.test).values
    assert np.array_equal(a, b, equal_nan=True)
    assert first.ridge_lambda in (1e-6, 1e-2)
    assert set(first.valid_mse) == {1e-6, 1e-2}


def test_test_range_never_reaches_the_fit(small_panel, pipeline_cfg):
    features = factor_panel(small_panel, pipeline_cfg).select_fields(list(FACTORS))
    labels = compute_labels(small_panel, pipeline_cfg)
    split = split_by_fraction(small_panel.dates)

    perturbed = np.array(features.values)
    perturbed[:, split.test.mask(features.dates), :] += 100.0
    shifted = PanelTensor(features.instruments, features.dates, features.fields, perturbed)

    before = select_ridge(features, labels, split, (1e-6, 1e-2)).model
    after = select_ridge(shifted, labels, split, (1e-6, 1e-2)).model
    assert np.array_equal(before.weights, after.weights)


def with_scaled_close(panel, position):
    close = np.array(panel.field("close"))
    close[:, position] *= np.linspace(0.5, 2.0, len(panel.instruments))
    return panel.with_field("close", close)


def test_test_range_prices_never_reach_model_selection(small_panel, pipeline_cfg):
    features = factor_panel(small_panel, pipeline_cfg).select_fields(list(FACTORS))
    split = split_by_fraction(small_panel.dates)
    first_test = small_panel.date_position(split.test.start)
    grid = (1e-6, 1e-2, 1e2)
    labels = compute_labels(small_panel, pipeline_cfg)
    moved = compute_labels(with_scaled_close(small_panel, first_test), pipeline_cfg)

    before = select_ridge(features, labels, split, grid)
    after = select_ridge(features, moved, split, grid)

    assert after.valid_mse == before.valid_mse
    assert after.ridge_lambda == before.ridge_lambda
    assert np.array_equal(after.model.weights, before.model.weights)


def test_valid_range_prices_never_reach_the_training_targets(small_panel, pipeline_cfg):
    features = factor_panel(small_panel, pipeline_cfg).select_fields(list(FACTORS))
    split = split_by_fraction(small_panel.dates)
    first_valid = small_panel.date_position(split.valid.start)
    labels = compute_labels(small_panel, pipeline_cfg)
    moved = compute_labels(with_scaled_close(small_panel, first_valid), pipeline_cfg)

    before = assemble_samples(features, FACTORS, labels, split.train)
    after = assemble_samples(features, FACTORS, moved, split.train)

    assert np.array_equal(after.targets, before.targets)
    assert max(date for _, date in before.keys) < split.train.end


def test_assemble_samples_trims_labels_reaching_the_next_range():
    panel, labels = tiny_grid([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], LABELS)
    head = DateRange(panel.dates[0], panel.dates[1])

    samples = assemble_samples(panel, ["f"], labels, head)

    assert {date for _, date in samples.keys} == {panel.dates[0]}


def test_build_design_lags_and_zscore(make_single_field):
    panel = make_single_field([[1.0, 2.0, 3.0], [3.0, 6.0, 9.0]], name="f")

    design = build_design(panel, ["f"], ModelSpec(lookback=2))
    scaled = build_design(panel, ["f"], ModelSpec(feature_transform="zscore"))

    assert design.fields == ("f", "f@lag1")
    np.testing.assert_array_equal(design.field("f@lag1"), [[np.nan, 1.0, 2.0], [np.nan, 3.0, 6.0]])
    np.testing.assert_allclose(scaled.field("f"), [[-1.0] * 3, [1.0] * 3], atol=1e-9)


def test_model_spec_validation():
    with pytest.raises(InvalidConfig):
        ModelSpec(feature_transform="log")
    with pytest.raises(InvalidConfig):
        ModelSpec(ridge_grid=())
    with pytest.raises(InvalidConfig):
        ModelSpec(lookback=0)
    spec = ModelSpec(feature_transform="zscore", ridge_grid=(0.1,), lookback=3)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_linear_model_save_and_load(tmp_path):
    model = LinearModel(("a", "b"), [0.5, -1.25], 0.125, 1e-6)

    loaded = LinearModel.load(model.save(tmp_path / "model.json"))

    assert loaded.feature_names == ("a", "b")
    np.testing.assert_array_equal(loaded.weights, model.weights)
    assert loaded.ridge_lambda == 1e-6
