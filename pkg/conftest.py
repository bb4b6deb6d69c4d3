import numpy as np
import pandas as pd
import pytest

from market.panel import BASE_FIELDS, PanelTensor, PipelineConfig, gen_synthetic


def ohlcv_panel(close, volume=None, start="2021-01-04", instruments=None):
    """OHLCV panel around an N x T close matrix: open = close, high/low 1% away."""
    close = np.asarray(close, dtype=np.float64)
    n, t = close.shape
    volume = np.full((n, t), 1e6) if volume is None else np.asarray(volume, dtype=np.float64)
    values = np.stack([close, close * 1.01, close * 0.99, close, volume], axis=2)
    instruments = instruments or [f"S{i:02d}" for i in range(n)]
    return PanelTensor(instruments, pd.bdate_range(start, periods=t), BASE_FIELDS, values)


def single_field_panel(matrix, name="x", start="2021-01-04"):
    matrix = np.asarray(matrix, dtype=np.float64)
    n, t = matrix.shape
    return PanelTensor(
        [f"S{i:02d}" for i in range(n)],
        pd.bdate_range(start, periods=t),
        (name,),
        matrix[:, :, None],
    )


@pytest.fixture
def pipeline_cfg():
    return PipelineConfig()


@pytest.fixture(scope="session")
def small_panel():
    return gen_synthetic(24, 160, seed=3, signal_strength=0.6)


@pytest.fixture
def make_ohlcv():
    return ohlcv_panel


@pytest.fixture
def make_single_field():
    return single_field_panel


@pytest.fixture
def run_config_factory(tmp_path):
    """Small synthetic run configuration writing under tmp_path."""
    from research.conf import load_run_config

    def build(**overrides):
        values = {
            "output_dir": str(tmp_path / "run"),
            "n_instruments": 30,
            "n_dates": 320,
            "data_seed": 7,
            "signal_strength": 0.6,
            "max_loops": 3,
            "seed": 11,
            "topk": 10,
            "n_drop": 2,
            "min_fee": 0.0,
            "wall_clock_seconds": 0.0,
            "scheduler": "bandit",
            "generator": "template",
            "llm_endpoint": "",
            "llm_mode": "live",
        }
        values.update(overrides)
        return load_run_config(**values)

    return build
