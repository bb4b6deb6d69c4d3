"""
Run configuration.

A run-config file is a key-value env file using the same keys as the
environment variables read in settings (RESEARCH_* and LLM_GATEWAY_*).
Lookup order per key: process environment, then the file, then the
settings default.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from decouple import Config, RepositoryEnv
from decouple import config as env
from django.conf import settings

from market.backtest import StrategyConfig
from market.exceptions import InvalidConfig
from market.panel import PipelineConfig
from market.predictor import ModelSpec

from .bandit import uniform_weights
from .costeer import CoSteerConfig
from .exceptions import ConfigurationError, InvalidParameter
from .gateway import GatewayConfig
from .serializers import RunConfigSerializer

logger = logging.getLogger(__name__)

GATEWAY_PREFIX = "llm_"
STRATEGY_OVERRIDES = (
    "topk",
    "n_drop",
    "buy_cost",
    "sell_cost",
    "min_fee",
    "price_limit",
    "initial_cash",
    "retention_rank",
)


def env_key(name):
    if name.startswith(GATEWAY_PREFIX):
        return "LLM_GATEWAY_" + name[len(GATEWAY_PREFIX) :].upper()
    return "RESEARCH_" + name.upper()


def _settings_default(name):
    if name.startswith(GATEWAY_PREFIX):
        return settings.LLM_GATEWAY.get(name[len(GATEWAY_PREFIX) :].upper())
    return settings.RESEARCH.get(name.upper())


@dataclass(frozen=True)
class RunConfig:
    seed: int
    max_loops: int
    wall_clock_seconds: float
    scheduler: str
    generator: str
    output_dir: str
    panel_path: str
    n_instruments: int
    n_dates: int
    signal_strength: float
    data_seed: int
    train_fraction: float
    valid_fraction: float
    ridge_grid: tuple
    strategy_preset: str
    pipeline: PipelineConfig
    strategy: StrategyConfig
    costeer: CoSteerConfig
    gateway: GatewayConfig
    bandit_tau: float
    bandit_sigma: float
    reward_mode: str
    reward_weights: tuple
    dedup_threshold: float
    abs_dedup: bool
    dedup_candidates: bool
    source: Optional[str] = None

    @property
    def weights(self):
        return np.asarray(self.reward_weights) if self.reward_weights else uniform_weights()

    @property
    def model_spec(self):
        return ModelSpec(ridge_grid=self.ridge_grid)

    @classmethod
    def from_values(cls, values, source=None):
        try:
            strategy = StrategyConfig.preset(
                values["strategy_preset"],
                **{k: values[k] for k in STRATEGY_OVERRIDES if k in values},
            )
            pipeline = PipelineConfig(values["epsilon"], values["horizon_tau"], values["window_ell"])
            costeer = CoSteerConfig(
                values["costeer_delta"],
                values["sim_threshold"],
                values["max_inner_iters"],
                values["max_outer_rounds"],
            )
            ModelSpec(ridge_grid=values["ridge_grid"])
        except (InvalidConfig, InvalidParameter) as exc:
            raise ConfigurationError(str(exc)) from exc
        gateway = GatewayConfig(
            endpoint=values["llm_endpoint"],
            model=values["llm_model"],
            token_env=values["llm_token_env"],
            temperature=values["llm_temperature"],
            max_tokens=values["llm_max_tokens"],
            timeout=values["llm_timeout"],
            retries=values["llm_retries"],
            mode=values["llm_mode"],
            replay_dir=values["llm_replay_dir"],
        )
        return cls(
            seed=values["seed"],
            max_loops=values["max_loops"],
            wall_clock_seconds=values["wall_clock_seconds"],
            scheduler=values["scheduler"],
            generator=values["generator"],
            output_dir=values["output_dir"],
            panel_path=values["panel_path"],
            n_instruments=values["n_instruments"],
            n_dates=values["n_dates"],
            signal_strength=values["signal_strength"],
            data_seed=values["data_seed"],
            train_fraction=values["train_fraction"],
            valid_fraction=values["valid_fraction"],
            ridge_grid=tuple(values["ridge_grid"]),
            strategy_preset=values["strategy_preset"],
            pipeline=pipeline,
            strategy=strategy,
            costeer=costeer,
            gateway=gateway,
            bandit_tau=values["bandit_tau"],
            bandit_sigma=values["bandit_sigma"],
            reward_mode=values["reward_mode"],
            reward_weights=tuple(values["reward_weights"]),
            dedup_threshold=values["dedup_threshold"],
            abs_dedup=values["abs_dedup"],
            dedup_candidates=values["dedup_candidates"],
            source=source,
        )

    def needs_gateway(self):
        return self.generator == "gateway" or self.scheduler == "llm"

    def manifest(self):
        """Config path, seed, output directory and resolved plugin choices."""
        return {
            "config_path": self.source,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "scheduler": self.scheduler,
            "generator": self.generator,
            "max_loops": self.max_loops,
            "wall_clock_seconds": self.wall_clock_seconds,
            "data": {
                "panel_path": self.panel_path,
                "n_instruments": self.n_instruments,
                "n_dates": self.n_dates,
                "signal_strength": self.signal_strength,
                "data_seed": self.data_seed,
            },
            "pipeline": {
                "epsilon": self.pipeline.epsilon,
                "horizon_tau": self.pipeline.horizon_tau,
                "window_ell": self.pipeline.window_ell,
                "train_fraction": self.train_fraction,
                "valid_fraction": self.valid_fraction,
                "ridge_grid": list(self.ridge_grid),
            },
            "strategy": {"preset": self.strategy_preset, **self.strategy.to_dict()},
            "costeer": {
                "delta": self.costeer.delta,
                "sim_threshold": self.costeer.sim_threshold,
                "max_inner_iters": self.costeer.max_inner_iters,
                "max_outer_rounds": self.costeer.max_outer_rounds,
            },
            "bandit": {
                "tau": self.bandit_tau,
                "sigma": self.bandit_sigma,
                "reward_mode": self.reward_mode,
                "reward_weights": self.weights.tolist(),
            },
            "dedup": {
                "threshold": self.dedup_threshold,
                "abs_dedup": self.abs_dedup,
                "dedup_candidates": self.dedup_candidates,
            },
            "gateway": {
                "endpoint": self.gateway.endpoint,
                "model": self.gateway.model,
                "mode": self.gateway.mode,
            },
        }


def load_run_config(path=None, **overrides):
    """Merge environment, config file and settings, apply overrides and validate.

    Overrides use the lower-case field names; None leaves a value untouched.
    """
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"run-config file {path} does not exist")
        source = Config(RepositoryEnv(str(path)))
    else:
        source = env

    raw = {}
    for name in RunConfigSerializer().fields:
        default = _settings_default(name)
        value = source(env_key(name), default=default)
        if value is not None:
            raw[name] = value
    raw.update({k: v for k, v in overrides.items() if v is not None})

    serializer = RunConfigSerializer(data=raw)
    if not serializer.is_valid():
        raise ConfigurationError(f"invalid run configuration: {serializer.errors}")
    run_config = RunConfig.from_values(serializer.validated_data, str(path) if path else None)
    logger.debug("run configuration loaded from %s", path or "settings")
    return run_config
