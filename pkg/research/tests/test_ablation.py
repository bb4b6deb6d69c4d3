import pandas as pd
import pytest

from research.ablation import compare_schedulers


def test_every_scheduler_seed_pair_gets_a_row(run_config_factory, tmp_path):
    run_config = run_config_factory(max_loops=1)

    result = compare_schedulers(run_config, range(2), output_dir=tmp_path / "ablation")

    frame = result.frame()
    assert list(frame["scheduler"]) == ["bandit", "bandit", "random", "random"]
    assert list(frame["seed"]) == [0, 1, 0, 1]
    assert (frame["total_loops"] == 1).all()
    assert (frame["sota_selections"] <= frame["valid_loops"]).all()
    assert set(result.mean_scores()) == {"bandit", "random"}
    path = result.write_csv(tmp_path / "ablation.csv")
    pd.testing.assert_frame_equal(pd.read_csv(path), frame, check_dtype=False)


def test_ablation_is_reproducible(run_config_factory, tmp_path):
    run_config = run_config_factory(max_loops=2)

    first = compare_schedulers(run_config, [3], ("random",), output_dir=tmp_path / "a")
    second = compare_schedulers(run_config, [3], ("random",), output_dir=tmp_path / "b")

    pd.testing.assert_frame_equal(first.frame(), second.frame())


@pytest.mark.slow
def test_bandit_is_not_worse_than_random(run_config_factory, tmp_path):
    run_config = run_config_factory(n_instruments=50, n_dates=400, max_loops=20)

    result = compare_schedulers(run_config, range(10), output_dir=tmp_path / "ablation")

    means = result.mean_scores()
    assert means["bandit"] >= means["random"]
