"""Scheduler ablation: the same seeded runs under different action schedulers."""

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import pandas as pd

from .bandit import weighted_score
from .loop import prepare_data, run_loop

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationRow:
    scheduler: str
    seed: int
    total_loops: int
    valid_loops: int
    sota_selections: int
    final_score: float
    factor_ic: float


@dataclass(frozen=True)
class AblationResult:
    rows: tuple

    def frame(self):
        return pd.DataFrame([row.__dict__ for row in self.rows])

    def mean_scores(self):
        return self.frame().groupby("scheduler")["final_score"].mean().to_dict()

    def write_csv(self, path):
        self.frame().to_csv(path, index=False)
        return Path(path)


def compare_schedulers(run_config, seeds, schedulers=("bandit", "random"), max_loops=None, output_dir=None):
    """Run every (scheduler, seed) pair on one shared panel and score the final SOTA."""
    base = Path(output_dir or run_config.output_dir)
    data = prepare_data(run_config)
    rows = []
    for scheduler in schedulers:
        for seed in seeds:
            cfg = replace(
                run_config,
                scheduler=scheduler,
                seed=int(seed),
                max_loops=run_config.max_loops if max_loops is None else max_loops,
            )
            summary = run_loop(cfg, data=data, output_dir=base / scheduler / f"seed_{seed}")
            score = weighted_score(summary.sota.current, cfg.weights)
            logger.info("%s seed %s: final score %.6f", scheduler, seed, score)
            rows.append(
                AblationRow(
                    scheduler=scheduler,
                    seed=int(seed),
                    total_loops=summary.total_loops,
                    valid_loops=summary.valid_loops,
                    sota_selections=summary.sota_selections,
                    final_score=score,
                    factor_ic=summary.sota.factor_metrics.ic,
                )
            )
    return AblationResult(tuple(rows))
