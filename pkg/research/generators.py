"""
Hypothesis generators.

The template generator is deterministic. It walks factor families
(momentum, volatility, volume-price correlation) and escalates the
composition depth of a family after an accepted experiment, switching to
the next family after a rejected one. The gateway generator asks a remote
model for the same hypothesis shape.
"""

import json
import logging
from dataclasses import dataclass, field, replace

from django.template.loader import render_to_string

from market.dsl import OPERATORS
from market.exceptions import MarketError
from market.predictor import ModelSpec

from .costeer import FACTOR, MODEL, TaskNode, artifact_hint
from .exceptions import (
    GatewayUnavailable,
    GenerationFailed,
    ImplementerUnavailable,
    InvalidParameter,
    MalformedReply,
)

logger = logging.getLogger(__name__)

MAX_FACTOR_TASKS = 5
WINDOWS = (5, 10, 20, 30, 60)
TASKS_PER_HYPOTHESIS = 3

_RET = "$close/Ref($close, 1) - 1"
_VOLATILITY = (
    f"Log(Std({_RET}, {{w}})/(Mean(Abs({_RET}), {{w}}) + 1e-12) + 1e-12)"
)

# Each level nests deeper than the one before it.
FAMILY_TEMPLATES = {
    "momentum": (
        "$close/Ref($close, {w}) - 1",
        f"Mean({_RET}, {{w}})",
        f"Mean({_RET}, {{w}})/(Std({_RET}, {{w}}) + 1e-12)",
        f"(Mean(({_RET})*Log($volume + 1), {{w}}) - Mean({_RET}, {{w}}))"
        f"/(Std({_RET}, {{w}}) + 1e-12)",
    ),
    "volatility": (
        f"Std({_RET}, {{w}})",
        f"Std({_RET}, {{w}})/Mean(Abs({_RET}), {{w}})",
        _VOLATILITY,
        f"Mean({_VOLATILITY}, 5)",
    ),
    "volume_corr": (
        "Corr($close, Log($volume + 1), {w})",
        "Corr($close/Ref($close, 1), Log($volume/Ref($volume, 1) + 1), {w})",
        "Corr($close/Ref($close, 1), Log($volume/Ref($volume, 1) + 1), {w})"
        f"*Std({_RET}, {{w}})",
        "Mean(Corr($close/Ref($close, 1), Log($volume/Ref($volume, 1) + 1), {w}), 5)"
        f"*Std({_RET}, {{w}})",
    ),
}
FAMILIES = tuple(FAMILY_TEMPLATES)
FAMILY_TAGS = {"momentum": "MOM", "volatility": "VOL", "volume_corr": "VCR"}

LOOKBACKS = (1, 2, 3, 5)
MODEL_MUTATIONS = ("feature_transform", "lookback", "ridge_up", "ridge_down")


def family_formula(family, level, window):
    templates = FAMILY_TEMPLATES[family]
    if level < len(templates):
        return templates[level].format(w=window)
    return f"Mean({family_formula(family, level - 1, window)}, 5)"


@dataclass(frozen=True)
class Hypothesis:
    hypothesis_id: str
    action: str
    statement: str
    rationale: str
    tasks: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.action == FACTOR and not 1 <= len(self.tasks) <= MAX_FACTOR_TASKS:
            raise GenerationFailed("a factor hypothesis carries between 1 and 5 tasks")
        if self.action == MODEL and len(self.tasks) != 1:
            raise GenerationFailed("a model hypothesis carries exactly one task")
        if self.action not in (FACTOR, MODEL):
            raise GenerationFailed(f"unknown action {self.action!r}")
        if any(task.kind != self.action for task in self.tasks):
            raise GenerationFailed("task kinds must match the hypothesis action")

    def to_dict(self):
        return {
            "hypothesis_id": self.hypothesis_id,
            "action": self.action,
            "statement": self.statement,
            "rationale": self.rationale,
            "tasks": [
                {"task_id": t.task_id, "description": t.description, "kind": t.kind}
                for t in self.tasks
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, payload):
        tasks = [TaskNode(t["task_id"], t["description"], t["kind"]) for t in payload["tasks"]]
        return cls(
            payload["hypothesis_id"],
            payload["action"],
            payload["statement"],
            payload["rationale"],
            tasks,
            dict(payload.get("meta", {})),
        )


@dataclass(frozen=True)
class ScenarioContext:
    """Background, data schema, artifact grammar and strategy handed to generators."""

    background: str
    fields: tuple
    operators: tuple
    strategy: str

    @classmethod
    def default(cls, fields, strategy_cfg):
        return cls(
            background=(
                "Daily cross-sectional equity research. Factors are scored by how well a "
                "linear predictor built on them ranks next-day returns, then traded with a "
                "top-k long-only strategy."
            ),
            fields=tuple(fields),
            operators=tuple(OPERATORS),
            strategy=(
                f"top {strategy_cfg.topk}, drop {strategy_cfg.n_drop}, buy cost "
                f"{strategy_cfg.buy_cost}, sell cost {strategy_cfg.sell_cost}, min fee "
                f"{strategy_cfg.min_fee}, price limit {strategy_cfg.price_limit}"
            ),
        )


@dataclass(frozen=True)
class GenerationContext:
    iteration: int
    action: str
    history: tuple
    model_spec: ModelSpec
    library_names: tuple
    scenario: ScenarioContext


def _last_meta(history, action):
    """Decisions and metadata of earlier records for one action, oldest first."""
    return [
        (record.decision, record.hypothesis.meta if record.hypothesis else {})
        for record in history
        if record.action == action
    ]


class TemplateGenerator:
    name = "template"

    def synthesize(self, context):
        if context.action == FACTOR:
            return self._factor_hypothesis(context)
        return self._model_hypothesis(context)

    def suggest_direction(self, hypothesis, decision):
        if hypothesis is None:
            return "retry with a simpler hypothesis"
        if hypothesis.action == FACTOR:
            family = hypothesis.meta.get("family", "current")
            if decision:
                return f"refine the {family} family with a more complex composition"
            return f"shift away from the {family} family"
        if decision:
            return "keep adjusting the model in the same direction"
        return "try a different model adjustment"

    # -- factor side -----------------------------------------------------------

    def _factor_state(self, history):
        family, level, uses = FAMILIES[0], 0, {}
        for decision, meta in _last_meta(history, FACTOR):
            done = meta.get("family")
            if done not in FAMILY_TEMPLATES:
                continue
            uses[done] = uses.get(done, 0) + 1
            if decision:
                family, level = done, int(meta.get("level", 0)) + 1
            else:
                family, level = FAMILIES[(FAMILIES.index(done) + 1) % len(FAMILIES)], 0
        return family, level, uses.get(family, 0)

    def _factor_hypothesis(self, context):
        family, level, offset = self._factor_state(context.history)
        tag = FAMILY_TAGS[family]
        tasks = []
        for j in range(TASKS_PER_HYPOTHESIS):
            window = WINDOWS[(offset + j) % len(WINDOWS)]
            formula = family_formula(family, level, window)
            task_id = f"{tag}{level}_W{window}_I{context.iteration:03d}"
            description = f"{family} factor, level {level}, {window}-day window: `{formula}`"
            tasks.append(TaskNode(task_id, description, FACTOR))
        statement = f"{family.replace('_', ' ')} signals at composition level {level} predict next-day returns"
        rationale = (
            "the previous experiment in this family was accepted"
            if level > 0
            else "starting a new family after the previous direction stalled"
        )
        return Hypothesis(
            f"H{context.iteration:03d}",
            FACTOR,
            statement,
            rationale,
            tasks,
            {"family": family, "level": level, "offset": offset},
        )

    # -- model side ------------------------------------------------------------

    def _mutation_index(self, history):
        k = 0
        for decision, meta in _last_meta(history, MODEL):
            if "mutation" in meta:
                k = int(meta["mutation"]) + (0 if decision else 1)
        return k % len(MODEL_MUTATIONS)

    @staticmethod
    def mutate(spec, mutation):
        if mutation == "feature_transform":
            return replace(spec, feature_transform="none" if spec.feature_transform == "zscore" else "zscore")
        if mutation == "lookback":
            position = LOOKBACKS.index(spec.lookback) if spec.lookback in LOOKBACKS else 0
            return replace(spec, lookback=LOOKBACKS[(position + 1) % len(LOOKBACKS)])
        if mutation == "ridge_up":
            return replace(spec, ridge_grid=tuple(v * 10 for v in spec.ridge_grid))
        return replace(spec, ridge_grid=tuple(v / 10 for v in spec.ridge_grid))

    def _model_hypothesis(self, context):
        k = self._mutation_index(context.history)
        mutation = MODEL_MUTATIONS[k]
        spec = self.mutate(context.model_spec, mutation)
        payload = json.dumps(spec.to_dict(), sort_keys=True)
        task = TaskNode(
            f"MODEL_I{context.iteration:03d}",
            f"model adjustment ({mutation}): `{payload}`",
            MODEL,
        )
        return Hypothesis(
            f"H{context.iteration:03d}",
            MODEL,
            f"adjusting the predictor by {mutation.replace('_', ' ')} improves ranking quality",
            "the factor library is fixed; only the predictor changes",
            [task],
            {"mutation": k},
        )


class GatewayGenerator:
    name = "gateway"

    def __init__(self, gateway, advisor=None):
        self.gateway = gateway
        self.advisor = advisor or TemplateGenerator()

    def suggest_direction(self, hypothesis, decision):
        return self.advisor.suggest_direction(hypothesis, decision)

    def synthesize(self, context):
        history = [
            {
                "decision": "accepted" if r.decision else "rejected",
                "statement": r.hypothesis.statement if r.hypothesis else "(no hypothesis)",
                "observations": r.feedback.observations if r.feedback else "",
                "direction": r.feedback.direction if r.feedback else "",
            }
            for r in context.history
        ]
        prompt = render_to_string(
            "research/hypothesis_prompt.txt",
            {
                "scenario": context.scenario,
                "action": context.action,
                "history": history,
                "model_spec": json.dumps(context.model_spec.to_dict(), sort_keys=True),
                "library": list(context.library_names),
            },
        )
        try:
            reply = self.gateway.generate(prompt, "hypothesis")
        except (GatewayUnavailable, MalformedReply) as exc:
            raise GenerationFailed(f"gateway generator failed: {exc}") from exc
        if reply["action"] != context.action:
            raise GenerationFailed(f"asked for a {context.action} hypothesis, got {reply['action']}")

        try:
            tasks = self._tasks(reply, context)
        except (InvalidParameter, MarketError) as exc:
            raise GenerationFailed(f"unusable {context.action} tasks: {exc}") from exc
        return Hypothesis(
            f"H{context.iteration:03d}",
            context.action,
            reply["hypothesis"],
            reply["reason"],
            tasks,
        )

    @staticmethod
    def _tasks(reply, context):
        suffix = f"_I{context.iteration:03d}"
        if context.action == MODEL:
            model = reply["model"]
            spec = ModelSpec(model["feature_transform"], model["ridge_grid"], model["lookback"])
            payload = json.dumps(spec.to_dict(), sort_keys=True)
            return [TaskNode(f"MODEL{suffix}", f"{model['description']}: `{payload}`", MODEL)]
        tasks = [
            TaskNode(f"{item['name']}{suffix}", f"{item['description']}: `{item['formula']}`", FACTOR)
            for item in reply["factors"]
        ]
        ids = [task.task_id for task in tasks]
        if len(set(ids)) != len(ids):
            raise InvalidParameter("factor task ids must be unique")
        return tasks


class GatewayImplementer:
    """Asks the gateway for a formula; unusable replies become rejected attempts."""

    def __init__(self, gateway, fields):
        self.gateway = gateway
        self.fields = tuple(fields)

    def implement(self, task, reference, feedback, attempt):
        if task.kind == MODEL:
            return artifact_hint(task.description) or task.description
        prompt = render_to_string(
            "research/factor_implementation_prompt.txt",
            {
                "task": task,
                "fields": ["$" + f for f in self.fields],
                "operators": list(OPERATORS),
                "reference": reference,
                "feedback": feedback,
            },
        )
        try:
            return self.gateway.generate(prompt, "factor_implementation")["formula"]
        except MalformedReply as exc:
            return exc.raw
        except GatewayUnavailable as exc:
            raise ImplementerUnavailable(str(exc)) from exc
