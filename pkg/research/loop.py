"""
The research loop: choose an action, synthesize a hypothesis, implement it
with Co-STEER, validate it and feed the outcome back.

Two SOTA sides are kept. The factor side owns the factor library, the model
side owns the predictor spec. An experiment replaces the incumbent of its
side when its weighted metric score is strictly higher.

Run directory layout, rewritten atomically at every iteration boundary:

    manifest.json        resolved run configuration
    trajectory.jsonl     one ExperimentRecord per line
    sota.json            SOTA snapshot
    state.json           scheduler state, counters and file lengths
    knowledge.jsonl      Co-STEER knowledge base
    costeer_trace.jsonl  Co-STEER scheduling events
    hypotheses.jsonl     hypothesis texts
"""

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from analytics.metrics import MetricsBundle
from analytics.reports import attempt_curve, export_hypotheses, write_nav_csv, yearly_ic_table
from market.dsl import parse, to_formula
from market.exceptions import MarketError
from market.library import alpha20_library
from market.panel import compute_labels, gen_synthetic, load_panel
from market.predictor import ModelSpec, split_by_fraction

from . import costeer
from .bandit import FACTOR, MODEL, make_scheduler, reward_from_metrics, state_vector
from .costeer import (
    FactorEvaluator,
    KnowledgeBase,
    KnowledgeEntry,
    ModelSpecEvaluator,
    TaskDag,
    TemplateImplementer,
    token_jaccard,
)
from .exceptions import (
    CycleDetected,
    ExperimentFailed,
    GatewayUnavailable,
    GenerationFailed,
    ImplementerUnavailable,
    InvalidParameter,
    MalformedReply,
    PersistenceError,
)
from .gateway import LlmGateway
from .generators import (
    GatewayGenerator,
    GatewayImplementer,
    GenerationContext,
    Hypothesis,
    ScenarioContext,
    TemplateGenerator,
)
from .validation import FactorLibrary, FeatureStore, dedup, evaluate_experiment

logger = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_FAILED = "failed"
BASELINE_PROVENANCE = "baseline"


# -- records -----------------------------------------------------------------------


@dataclass(frozen=True)
class Feedback:
    observations: str
    decision: bool
    deltas: tuple
    direction: str

    def to_dict(self):
        return {
            "observations": self.observations,
            "decision": self.decision,
            "deltas": [float(v) for v in self.deltas],
            "direction": self.direction,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            payload["observations"],
            bool(payload["decision"]),
            tuple(payload["deltas"]),
            payload["direction"],
        )


@dataclass(frozen=True)
class ExperimentRecord:
    iteration: int
    action: str
    hypothesis: Optional[Hypothesis]
    task_results: tuple = ()
    kept_factors: tuple = ()
    metrics: MetricsBundle = field(default_factory=MetricsBundle.nan)
    feedback: Optional[Feedback] = None
    reward: float = 0.0
    status: str = STATUS_OK
    failure_stage: str = ""
    model_spec: Optional[dict] = None

    @property
    def decision(self):
        return bool(self.feedback and self.feedback.decision)

    @property
    def valid(self):
        return self.status == STATUS_OK

    def to_dict(self):
        return {
            "iteration": self.iteration,
            "action": self.action,
            "status": self.status,
            "failure_stage": self.failure_stage,
            "hypothesis": self.hypothesis.to_dict() if self.hypothesis else None,
            "task_results": [dict(t) for t in self.task_results],
            "kept_factors": [{"name": n, "formula": f} for n, f in self.kept_factors],
            "model_spec": self.model_spec,
            "metrics": self.metrics.to_dict(),
            "feedback": self.feedback.to_dict() if self.feedback else None,
            "reward": self.reward,
        }

    @classmethod
    def from_dict(cls, payload):
        hypothesis = payload.get("hypothesis")
        feedback = payload.get("feedback")
        return cls(
            iteration=int(payload["iteration"]),
            action=payload["action"],
            hypothesis=Hypothesis.from_dict(hypothesis) if hypothesis else None,
            task_results=tuple(payload.get("task_results", ())),
            kept_factors=tuple((k["name"], k["formula"]) for k in payload.get("kept_factors", ())),
            metrics=MetricsBundle.from_dict(payload["metrics"]),
            feedback=Feedback.from_dict(feedback) if feedback else None,
            reward=float(payload["reward"]),
            status=payload["status"],
            failure_stage=payload.get("failure_stage", ""),
            model_spec=payload.get("model_spec"),
        )


# -- SOTA ----------------------------------------------------------------------------


@dataclass
class SotaSets:
    library: FactorLibrary
    factor_metrics: MetricsBundle
    model_spec: ModelSpec
    model_metrics: MetricsBundle
    current: MetricsBundle
    factor_records: tuple = ()
    model_record: Optional[int] = None

    def members(self, action):
        """Record ids whose artifacts make up SOTA(action).

        Factor experiments run on the incumbent model and model experiments on
        the incumbent library, so each side's SOTA holds the accepted factor
        records and the accepted model record.
        """
        ids = set(self.factor_records)
        if self.model_record is not None:
            ids.add(self.model_record)
        return ids

    def incumbent(self, action):
        return self.factor_metrics if action == FACTOR else self.model_metrics

    def accept(self, record, metrics, library=None, model_spec=None):
        if record.action == FACTOR:
            self.library = library
            self.factor_metrics = metrics
            self.factor_records = self.factor_records + (record.iteration,)
        else:
            self.model_spec = model_spec
            self.model_metrics = metrics
            self.model_record = record.iteration
        self.current = metrics

    def to_dict(self):
        return {
            "factor": {
                "library": self.library.to_dict(),
                "metrics": self.factor_metrics.to_dict(),
                "records": list(self.factor_records),
            },
            "model": {
                "spec": self.model_spec.to_dict(),
                "metrics": self.model_metrics.to_dict(),
                "record": self.model_record,
            },
            "current": self.current.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload, store):
        factor, model = payload["factor"], payload["model"]
        library = FactorLibrary(
            [store.entry(e["name"], e["formula"], e["provenance"]) for e in factor["library"]]
        )
        return cls(
            library=library,
            factor_metrics=MetricsBundle.from_dict(factor["metrics"]),
            model_spec=ModelSpec.from_dict(model["spec"]),
            model_metrics=MetricsBundle.from_dict(model["metrics"]),
            current=MetricsBundle.from_dict(payload["current"]),
            factor_records=tuple(factor["records"]),
            model_record=model["record"],
        )


def conditioned_records(history, action, sota):
    members = sota.members(action)
    return [r for r in history if r.action == action or r.iteration in members]


def condition_history(history, action, sota):
    """Hypotheses and feedback of the records relevant to `action`, oldest first."""
    records = conditioned_records(history, action, sota)
    return [r.hypothesis for r in records], [r.feedback for r in records]


def _describe(metrics, deltas):
    parts = []
    for name, delta in zip(MetricsBundle.keys(), deltas):
        value = getattr(metrics, name)
        if math.isnan(delta):
            parts.append(f"{name} {value:.4f}")
        else:
            parts.append(f"{name} {value:.4f} ({delta:+.4f})")
    return ", ".join(parts)


def analyze(result, sota, w, advisor=None, hypothesis=None):
    """Compare an experiment with the incumbent of its side."""
    incumbent = sota.incumbent(result.action)
    w = np.asarray(w, dtype=np.float64)
    new_vec = state_vector(result.metrics)
    old_vec = state_vector(incumbent)
    decision = bool(w @ new_vec > w @ old_vec)
    deltas = tuple(float(v) for v in new_vec - old_vec)
    raw_deltas = [
        getattr(result.metrics, k) - getattr(incumbent, k) for k in MetricsBundle.keys()
    ]
    observations = _describe(result.metrics, raw_deltas)
    if result.kept_factors:
        observations += f"; new factors: {', '.join(result.kept_factors)}"
    direction = advisor.suggest_direction(hypothesis, decision) if advisor else ""
    return Feedback(observations, decision, deltas, direction)


# -- data and plug-ins -----------------------------------------------------------------


@dataclass(frozen=True)
class ResearchData:
    panel: object
    labels: object
    split: object


def prepare_data(run_config):
    if run_config.panel_path:
        panel = load_panel(run_config.panel_path)
    else:
        panel = gen_synthetic(
            run_config.n_instruments,
            run_config.n_dates,
            run_config.data_seed,
            run_config.signal_strength,
        )
    labels = compute_labels(panel, run_config.pipeline)
    split = split_by_fraction(panel.dates, run_config.train_fraction, run_config.valid_fraction)
    return ResearchData(panel, labels, split)


@dataclass
class LoopPlugins:
    generator: object
    implementer: object
    scheduler: object
    factor_evaluator: object
    model_evaluator: object
    similarity: object = token_jaccard
    gateway: object = None


def build_plugins(run_config, panel, gateway=None):
    """Wire generator, implementer and scheduler; a remote backend must be ready first."""
    if run_config.needs_gateway() and gateway is None:
        run_config.gateway.check_ready()
        gateway = LlmGateway(run_config.gateway)
    if run_config.generator == "gateway":
        generator = GatewayGenerator(gateway)
        implementer = GatewayImplementer(gateway, panel.fields)
    else:
        generator = TemplateGenerator()
        implementer = TemplateImplementer()
    scheduler = make_scheduler(
        run_config.scheduler,
        run_config.seed,
        run_config.bandit_tau,
        run_config.bandit_sigma,
        run_config.reward_weights,
        gateway,
    )
    return LoopPlugins(
        generator=generator,
        implementer=implementer,
        scheduler=scheduler,
        factor_evaluator=FactorEvaluator(panel, max_window=run_config.pipeline.window_ell),
        model_evaluator=ModelSpecEvaluator(),
        gateway=gateway,
    )


# -- persistence -------------------------------------------------------------------


def _atomic_write(path, text):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _jsonl(items):
    return "".join(json.dumps(item, sort_keys=True) + "\n" for item in items)


def _read_jsonl(path, limit):
    if not path.exists():
        return []
    lines = [line for line in path.read_text().splitlines() if line.strip()]
    return [json.loads(line) for line in lines[:limit]]


@dataclass(frozen=True)
class LoopSummary:
    sota: SotaSets
    history: tuple
    baseline: MetricsBundle
    tokens: dict = field(default_factory=dict)

    @property
    def total_loops(self):
        return len(self.history)

    @property
    def valid_loops(self):
        return sum(1 for r in self.history if r.valid)

    @property
    def sota_selections(self):
        return sum(1 for r in self.history if r.decision)

    def to_dict(self):
        return {
            "total_loops": self.total_loops,
            "valid_loops": self.valid_loops,
            "sota_selections": self.sota_selections,
            "baseline": self.baseline.to_dict(),
            "factor_sota": self.sota.factor_metrics.to_dict(),
            "model_sota": self.sota.model_metrics.to_dict(),
            "current": self.sota.current.to_dict(),
            "tokens": self.tokens,
        }


class ResearchLoop:
    def __init__(self, run_config, plugins=None, data=None, output_dir=None, gateway=None):
        self.run_config = run_config
        self.data = data or prepare_data(run_config)
        self.plugins = plugins or build_plugins(run_config, self.data.panel, gateway)
        self.store = FeatureStore(self.data.panel, run_config.pipeline)
        self.scenario = ScenarioContext.default(self.data.panel.fields, run_config.strategy)
        self.output_dir = Path(output_dir or run_config.output_dir)
        self.weights = run_config.weights
        self.kb = KnowledgeBase()
        self.trace = []
        self.history = []
        self.sota = None
        self.baseline = None

    # -- evaluation --------------------------------------------------------------

    def evaluate(self, library, model_spec, action=FACTOR, kept=()):
        return evaluate_experiment(
            library.names,
            model_spec,
            self.store.feature_panel(library.entries),
            self.data.labels,
            self.data.split,
            self.run_config.strategy,
            self.run_config.pipeline.epsilon,
            kept,
            action,
        )

    def _baseline(self):
        entries = [
            self.store.entry(name, expr, BASELINE_PROVENANCE) for name, expr in alpha20_library()
        ]
        kept = dedup(
            [],
            [e.values for e in entries],
            self.run_config.dedup_threshold,
            self.run_config.abs_dedup,
            dedup_candidates=True,
        )
        library = FactorLibrary([entries[k] for k in kept])
        if len(library) < len(entries):
            logger.info("baseline library keeps %d of %d factors", len(library), len(entries))
        spec = self.run_config.model_spec
        result = self.evaluate(library, spec)
        metrics = result.metrics
        return SotaSets(library, metrics, spec, metrics, metrics)

    # -- lifecycle ---------------------------------------------------------------

    def start(self, resume=False):
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise PersistenceError(f"cannot create {self.output_dir}: {exc}") from exc
        if resume and (self.output_dir / "state.json").exists():
            self._restore()
            logger.info("resumed %s at loop %d", self.output_dir, len(self.history))
            return self
        self.sota = self._baseline()
        self.baseline = self.sota.factor_metrics
        self._write_manifest()
        self.commit()
        logger.info(
            "baseline: %d factors, ic=%.4f arr=%.4f",
            len(self.sota.library),
            self.baseline.ic,
            self.baseline.arr,
        )
        return self

    def run(self, max_loops=None, wall_clock_seconds=None):
        """Iterate until max_loops records exist or the wall-clock budget is spent."""
        if self.sota is None:
            self.start()
        max_loops = self.run_config.max_loops if max_loops is None else max_loops
        budget = (
            self.run_config.wall_clock_seconds if wall_clock_seconds is None else wall_clock_seconds
        )
        deadline = time.monotonic() + budget if budget and budget > 0 else None
        while len(self.history) < max_loops:
            if deadline is not None and time.monotonic() >= deadline:
                logger.info("wall-clock budget spent after %d loops", len(self.history))
                break
            self.step()
        return self.summary()

    def summary(self):
        tokens = self.plugins.gateway.tokens.to_dict() if self.plugins.gateway else {}
        return LoopSummary(self.sota, tuple(self.history), self.baseline, tokens)

    def final_evaluation(self):
        """The incumbent library under the incumbent model spec, evaluated from scratch."""
        return self.evaluate(self.sota.library, self.sota.model_spec)

    def write_reports(self, result=None):
        """Final report, NAV/trade/yearly-IC CSVs, library and attempt curve."""
        result = result or self.final_evaluation()
        out = self.output_dir
        summary = self.summary()
        payload = {
            "summary": summary.to_dict(),
            "final": result.metrics.to_dict(),
            "ridge_lambda": result.extra.get("ridge_lambda"),
            "backtest": result.report.to_dict(),
        }
        try:
            (out / "report.json").write_text(json.dumps(payload, indent=2, default=str))
            write_nav_csv(result.report, out / "nav.csv")
            result.report.write_trades_csv(out / "trades.csv")
            pd.DataFrame(yearly_ic_table(result.ic_series, result.rank_ic_series)).to_csv(
                out / "yearly_ic.csv", index=False
            )
            self.sota.library.save(out / "library.json")
            outcomes = [
                (t["total_attempts"], t["success"])
                for record in self.history
                for t in record.task_results
            ]
            max_k = self.run_config.costeer.max_inner_iters * self.run_config.costeer.max_outer_rounds
            (out / "attempt_curve.json").write_text(
                json.dumps(attempt_curve(outcomes, max_k), indent=2)
            )
        except OSError as exc:
            raise PersistenceError(f"cannot write reports to {out}: {exc}") from exc
        return out

    # -- one iteration -------------------------------------------------------------

    def step(self):
        iteration = len(self.history) + 1
        x = state_vector(self.sota.current)
        scheduler = self.plugins.scheduler
        try:
            action = scheduler.choose(x)
        except (GatewayUnavailable, MalformedReply) as exc:
            record = self._failed(iteration, FACTOR, None, (), "scheduling", exc, None)
            return self._finish(record, x, observe=False)

        incumbent = self.sota.incumbent(action)
        context = GenerationContext(
            iteration=iteration,
            action=action,
            history=tuple(conditioned_records(self.history, action, self.sota)),
            model_spec=self.sota.model_spec,
            library_names=self.sota.library.names,
            scenario=self.scenario,
        )
        try:
            hypothesis = self.plugins.generator.synthesize(context)
        except GenerationFailed as exc:
            record = self._failed(iteration, action, None, (), "synthesis", exc, incumbent)
            return self._finish(record, x)

        try:
            outcome = self._implement(hypothesis)
        except (CycleDetected, ImplementerUnavailable, InvalidParameter) as exc:
            record = self._failed(iteration, action, hypothesis, (), "implementation", exc, incumbent)
            return self._finish(record, x)
        task_results = tuple(
            {**r.to_dict(), "total_attempts": outcome.nodes[t].attempts}
            for t, r in outcome.results.items()
        )

        library, spec, kept = self.sota.library, self.sota.model_spec, ()
        try:
            if action == FACTOR:
                new_entries = self._factor_candidates(iteration, outcome)
                library = library.extended(new_entries)
                kept = tuple((e.name, to_formula(e.expr)) for e in new_entries)
            else:
                spec = self._model_candidate(outcome)
            result = self.evaluate(library, spec, action, [name for name, _ in kept])
        except ExperimentFailed as exc:
            record = self._failed(
                iteration, action, hypothesis, task_results, exc.stage, exc, incumbent
            )
            return self._finish(record, x)
        except MarketError as exc:
            record = self._failed(iteration, action, hypothesis, task_results, "fit", exc, incumbent)
            return self._finish(record, x)

        feedback = analyze(result, self.sota, self.weights, self.plugins.generator, hypothesis)
        record = ExperimentRecord(
            iteration=iteration,
            action=action,
            hypothesis=hypothesis,
            task_results=task_results,
            kept_factors=kept,
            metrics=result.metrics,
            feedback=feedback,
            reward=reward_from_metrics(
                result.metrics, incumbent, self.weights, self.run_config.reward_mode
            ),
            model_spec=spec.to_dict() if action == MODEL else None,
        )
        if feedback.decision:
            self.sota.accept(record, result.metrics, library=library, model_spec=spec)
        return self._finish(record, x)

    def _implement(self, hypothesis):
        dag = TaskDag.from_tasks(hypothesis.tasks)
        evaluator = (
            self.plugins.factor_evaluator
            if hypothesis.action == FACTOR
            else self.plugins.model_evaluator
        )
        outcome = costeer.run(
            dag,
            self.plugins.implementer,
            evaluator,
            self.run_config.costeer,
            self.kb,
            self.plugins.similarity,
        )
        offset = len(self.trace)
        self.trace.extend(
            {**replace(event, step=offset + event.step).to_dict(), "hypothesis_id": hypothesis.hypothesis_id}
            for event in outcome.trace
        )
        return outcome

    def _factor_candidates(self, iteration, outcome):
        candidates = []
        for result in outcome.successes():
            try:
                candidates.append(
                    self.store.entry(result.task_id, parse(result.artifact), f"loop {iteration}")
                )
            except MarketError as exc:
                logger.warning("task %s artifact rejected on the full panel: %s", result.task_id, exc)
        if not candidates:
            raise ExperimentFailed("implementation", "no task produced a usable factor")
        kept = dedup(
            self.sota.library,
            [c.values for c in candidates],
            self.run_config.dedup_threshold,
            self.run_config.abs_dedup,
            self.run_config.dedup_candidates,
        )
        if not kept:
            raise ExperimentFailed("dedup", "every new factor duplicates the library")
        return [candidates[k] for k in kept]

    def _model_candidate(self, outcome):
        accepted = outcome.successes()
        if not accepted:
            raise ExperimentFailed("implementation", "the model task was not implemented")
        try:
            return ModelSpec.from_dict(json.loads(accepted[0].artifact))
        except (ValueError, MarketError) as exc:
            raise ExperimentFailed("implementation", str(exc)) from exc

    def _failed(self, iteration, action, hypothesis, task_results, stage, exc, incumbent):
        logger.warning("loop %d (%s) failed at %s: %s", iteration, action, stage, exc)
        metrics = MetricsBundle.nan()
        deltas = tuple(
            float(v) for v in state_vector(metrics) - state_vector(incumbent or self.sota.current)
        )
        feedback = Feedback(
            observations=f"{stage} failed: {exc}",
            decision=False,
            deltas=deltas,
            direction=self.plugins.generator.suggest_direction(hypothesis, False),
        )
        reward = (
            reward_from_metrics(metrics, incumbent, self.weights, self.run_config.reward_mode)
            if incumbent is not None
            else 0.0
        )
        return ExperimentRecord(
            iteration=iteration,
            action=action,
            hypothesis=hypothesis,
            task_results=task_results,
            metrics=metrics,
            feedback=feedback,
            reward=reward,
            status=STATUS_FAILED,
            failure_stage=stage,
        )

    def _finish(self, record, x, observe=True):
        if observe:
            self.plugins.scheduler.observe(record.action, x, record.reward)
        self.history.append(record)
        self.commit()
        logger.info(
            "loop %d: action=%s hypothesis=%s status=%s decision=%s reward=%.6f",
            record.iteration,
            record.action,
            record.hypothesis.hypothesis_id if record.hypothesis else "-",
            record.status,
            record.decision,
            record.reward,
        )
        return record

    # -- persistence ---------------------------------------------------------------

    def _write_manifest(self):
        try:
            _atomic_write(
                self.output_dir / "manifest.json",
                json.dumps(self.run_config.manifest(), indent=2, sort_keys=True),
            )
        except OSError as exc:
            raise PersistenceError(f"cannot write the run manifest: {exc}") from exc

    def commit(self):
        """Rewrite the run directory; state.json goes last and records the committed lengths."""
        out = self.output_dir
        state = {
            "records": len(self.history),
            "knowledge_entries": len(self.kb),
            "trace_events": len(self.trace),
            "scheduler": self.plugins.scheduler.to_dict(),
            "baseline": self.baseline.to_dict(),
            "sota": self.sota.to_dict(),
        }
        try:
            _atomic_write(out / "trajectory.jsonl", _jsonl(r.to_dict() for r in self.history))
            _atomic_write(out / "knowledge.jsonl", _jsonl(e.to_dict() for e in self.kb.entries()))
            _atomic_write(out / "costeer_trace.jsonl", _jsonl(self.trace))
            tmp = out / "hypotheses.jsonl.tmp"
            export_hypotheses(self.history, tmp)
            os.replace(tmp, out / "hypotheses.jsonl")
            _atomic_write(out / "sota.json", json.dumps(self.sota.to_dict(), indent=2, sort_keys=True))
            _atomic_write(out / "state.json", json.dumps(state, sort_keys=True))
        except OSError as exc:
            raise PersistenceError(f"cannot persist loop state to {out}: {exc}") from exc

    def _restore(self):
        out = self.output_dir
        try:
            state = json.loads((out / "state.json").read_text())
            self.history = [
                ExperimentRecord.from_dict(item)
                for item in _read_jsonl(out / "trajectory.jsonl", state["records"])
            ]
            self.kb = KnowledgeBase(
                KnowledgeEntry.from_dict(item)
                for item in _read_jsonl(out / "knowledge.jsonl", state["knowledge_entries"])
            )
            self.trace = _read_jsonl(out / "costeer_trace.jsonl", state["trace_events"])
        except (OSError, ValueError, KeyError) as exc:
            raise PersistenceError(f"cannot resume from {out}: {exc}") from exc
        if len(self.history) != state["records"]:
            raise PersistenceError(f"{out}/trajectory.jsonl is shorter than the committed state")
        self.baseline = MetricsBundle.from_dict(state["baseline"])
        self.sota = SotaSets.from_dict(state["sota"], self.store)
        self.plugins.scheduler.restore(state["scheduler"])


def run_loop(run_config, plugins=None, data=None, resume=False, output_dir=None, gateway=None):
    loop = ResearchLoop(run_config, plugins=plugins, data=data, output_dir=output_dir, gateway=gateway)
    loop.start(resume=resume)
    return loop.run()
