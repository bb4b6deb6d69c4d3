"""
Co-STEER: complexity-weighted task scheduling with a growing knowledge base.

Tasks form a DAG. They run in a topological order that prefers the simplest
free task (smallest complexity alpha, then id). A task that fails gets its
alpha raised by delta and the order is recomputed before anything else runs.
Every implementation attempt, good or bad, lands in the knowledge base, and
later tasks pull the most similar earlier attempt as a reference.
"""

import heapq
import json
import logging
import re
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from market.dsl import evaluate, parse
from market.exceptions import DslError, MarketError
from market.predictor import ModelSpec

from .exceptions import CycleDetected, InvalidParameter

logger = logging.getLogger(__name__)

FACTOR = "factor"
MODEL = "model"

_BUILDS_ON = re.compile(r"builds on:\s*([A-Za-z0-9_\-]+)", re.IGNORECASE)
_ARTIFACT = re.compile(r"`([^`]+)`")
_WORD = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class CoSteerConfig:
    delta: float = 0.5
    sim_threshold: float = 0.3
    max_inner_iters: int = 10
    max_outer_rounds: int = 3

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidParameter("delta must be positive")
        if not 0 <= self.sim_threshold <= 1:
            raise InvalidParameter("sim_threshold must lie in [0, 1]")
        if self.max_inner_iters < 1 or self.max_outer_rounds < 1:
            raise InvalidParameter("iteration caps must be at least 1")


@dataclass(frozen=True)
class TaskNode:
    task_id: str
    description: str
    kind: str = FACTOR
    complexity_alpha: float = 1.0
    attempts: int = 0

    def __post_init__(self):
        if self.kind not in (FACTOR, MODEL):
            raise InvalidParameter(f"unknown task kind {self.kind!r}")
        if self.complexity_alpha < 1:
            raise InvalidParameter("complexity_alpha starts at 1 and only grows")
        if self.attempts < 0:
            raise InvalidParameter("attempts must be non-negative")


def _find_cycle(ids, edges):
    successors = {node: [] for node in ids}
    for source, target in edges:
        successors[source].append(target)
    colour = {node: 0 for node in ids}
    stack = []

    def visit(node):
        colour[node] = 1
        stack.append(node)
        for nxt in sorted(successors[node]):
            if colour[nxt] == 1:
                return stack[stack.index(nxt) :] + [nxt]
            if colour[nxt] == 0:
                found = visit(nxt)
                if found:
                    return found
        stack.pop()
        colour[node] = 2
        return None

    for node in sorted(ids):
        if colour[node] == 0:
            found = visit(node)
            if found:
                return found
    return None


@dataclass(frozen=True)
class TaskDag:
    nodes: tuple
    edges: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        ids = [node.task_id for node in self.nodes]
        if len(set(ids)) != len(ids):
            raise InvalidParameter("task ids must be unique")
        known = set(ids)
        for source, target in self.edges:
            if source not in known or target not in known:
                raise InvalidParameter(f"edge {source} -> {target} names an unknown task")
        cycle = _find_cycle(ids, self.edges)
        if cycle:
            raise CycleDetected(cycle)

    @classmethod
    def from_tasks(cls, nodes):
        """Derive edges from "builds on: <id>" references in task descriptions."""
        nodes = tuple(nodes)
        known = {node.task_id for node in nodes}
        edges = []
        for node in nodes:
            for reference in _BUILDS_ON.findall(node.description):
                if reference in known and reference != node.task_id:
                    edges.append((reference, node.task_id))
        return cls(nodes, tuple(edges))

    def node(self, task_id):
        for node in self.nodes:
            if node.task_id == task_id:
                return node
        raise KeyError(task_id)

    def is_topological(self, order):
        position = {task_id: k for k, task_id in enumerate(order)}
        return all(
            position[s] < position[t]
            for s, t in self.edges
            if s in position and t in position
        )


@dataclass(frozen=True)
class TaskOrdering:
    order: tuple
    weights: dict


def edge_weights(dag, alphas):
    return {(s, t): alphas[s] / alphas[t] for s, t in dag.edges}


def update_task_order(dag, alphas, remaining=None):
    """Simplest-first topological order of the remaining tasks.

    Edges from tasks outside `remaining` are already satisfied.
    """
    remaining = set(remaining) if remaining is not None else {n.task_id for n in dag.nodes}
    indegree = {task_id: 0 for task_id in remaining}
    successors = {task_id: [] for task_id in remaining}
    for source, target in dag.edges:
        if source in remaining and target in remaining:
            indegree[target] += 1
            successors[source].append(target)

    heap = [(alphas[t], t) for t, d in indegree.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, task_id = heapq.heappop(heap)
        order.append(task_id)
        for nxt in successors[task_id]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                heapq.heappush(heap, (alphas[nxt], nxt))
    if len(order) != len(remaining):
        raise CycleDetected(_find_cycle(sorted(remaining), [
            e for e in dag.edges if e[0] in remaining and e[1] in remaining
        ]) or sorted(remaining))
    return TaskOrdering(tuple(order), edge_weights(dag, alphas))


# -- knowledge base ---------------------------------------------------------------


@dataclass(frozen=True)
class AttemptFeedback:
    success: bool
    message: str
    detail: dict = field(default_factory=dict)


@dataclass(frozen=True)
class KnowledgeEntry:
    task_id: str
    task_description: str
    artifact: str
    feedback: AttemptFeedback

    def to_dict(self):
        return {
            "task_id": self.task_id,
            "task_description": self.task_description,
            "artifact": self.artifact,
            "feedback": asdict(self.feedback),
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            payload["task_id"],
            payload["task_description"],
            payload["artifact"],
            AttemptFeedback(**payload["feedback"]),
        )


class KnowledgeBase:
    """Append-only (task, artifact, feedback) store."""

    def __init__(self, entries=()):
        self._entries = list(entries)
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def append(self, entry):
        with self._lock:
            self._entries.append(entry)

    def entries(self):
        with self._lock:
            return tuple(self._entries)

    def save(self, path):
        lines = [json.dumps(e.to_dict(), sort_keys=True) for e in self.entries()]
        Path(path).write_text("".join(line + "\n" for line in lines))

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            return cls()
        lines = [line for line in path.read_text().splitlines() if line.strip()]
        return cls(KnowledgeEntry.from_dict(json.loads(line)) for line in lines)


def token_jaccard(a, b):
    left, right = set(_WORD.findall(a.lower())), set(_WORD.findall(b.lower()))
    union = left | right
    if not union:
        return 0.0
    return len(left & right) / len(union)


@dataclass(frozen=True)
class Retrieval:
    entry: KnowledgeEntry
    similarity: float


def kb_retrieve(kb, task, cfg, similarity=token_jaccard):
    best = None
    for entry in kb.entries():
        score = similarity(task.description, entry.task_description)
        # later entries win ties
        if score > cfg.sim_threshold and (best is None or score >= best.similarity):
            best = Retrieval(entry, score)
    return best


# -- implementation ---------------------------------------------------------------


@dataclass(frozen=True)
class TaskResult:
    task_id: str
    artifact: Optional[str]
    feedback: Optional[AttemptFeedback]
    attempts: int
    success: bool

    def to_dict(self):
        return {
            "task_id": self.task_id,
            "artifact": self.artifact,
            "success": self.success,
            "attempts": self.attempts,
            "message": self.feedback.message if self.feedback else "",
        }


def implement_task(task, kb, implementer, evaluator, cfg, similarity=token_jaccard):
    """Generate-evaluate rounds until the evaluator accepts or the cap is hit."""
    feedback = None
    artifact = None
    for attempt in range(1, cfg.max_inner_iters + 1):
        reference = kb_retrieve(kb, task, cfg, similarity)
        artifact = implementer.implement(
            task, reference.entry if reference else None, feedback, attempt
        )
        feedback = evaluator.check(task, artifact)
        kb.append(KnowledgeEntry(task.task_id, task.description, artifact, feedback))
        logger.debug(
            "task %s attempt %d: %s (%s)",
            task.task_id,
            attempt,
            "ok" if feedback.success else "failed",
            feedback.message,
        )
        if feedback.success:
            return TaskResult(task.task_id, artifact, feedback, attempt, True)
    return TaskResult(task.task_id, artifact, feedback, cfg.max_inner_iters, False)


@dataclass(frozen=True)
class TraceEvent:
    step: int
    task_id: str
    attempt: int
    outcome: str
    alpha_after: float
    inner_attempts: int

    def to_dict(self):
        return asdict(self)


@dataclass
class CoSteerOutcome:
    results: dict
    nodes: dict
    trace: list
    execution_order: list

    def successes(self):
        return [r for r in self.results.values() if r.success]

    def task_outcomes(self):
        """(attempts, success) per task, for attempt curves."""
        return [(self.nodes[t].attempts, r.success) for t, r in self.results.items()]


def run(dag, implementer, evaluator, cfg, kb=None, similarity=token_jaccard):
    """Schedule and implement every task of the DAG."""
    kb = kb if kb is not None else KnowledgeBase()
    nodes = {node.task_id: node for node in dag.nodes}
    failures = {task_id: 0 for task_id in nodes}
    results = {}
    trace = []
    execution_order = []

    while True:
        remaining = [t for t in nodes if t not in results]
        if not remaining:
            break
        alphas = {t: nodes[t].complexity_alpha for t in nodes}
        ordering = update_task_order(dag, alphas, remaining)
        for task_id in ordering.order:
            node = nodes[task_id]
            result = implement_task(node, kb, implementer, evaluator, cfg, similarity)
            execution_order.append(task_id)
            failures_so_far = failures[task_id]
            node = replace(node, attempts=node.attempts + result.attempts)
            if not result.success:
                failures[task_id] += 1
                node = replace(node, complexity_alpha=node.complexity_alpha + cfg.delta)
            nodes[task_id] = node
            trace.append(
                TraceEvent(
                    step=len(trace) + 1,
                    task_id=task_id,
                    attempt=failures_so_far + 1,
                    outcome="success" if result.success else "failure",
                    alpha_after=node.complexity_alpha,
                    inner_attempts=result.attempts,
                )
            )
            if result.success:
                results[task_id] = result
                continue
            if failures[task_id] >= cfg.max_outer_rounds:
                results[task_id] = result
            break

    ordered = {t: results[t] for t in sorted(results, key=execution_order.index)}
    return CoSteerOutcome(ordered, nodes, trace, execution_order)


def write_trace(trace, path, append=True):
    mode = "a" if append else "w"
    with Path(path).open(mode) as handle:
        for event in trace:
            handle.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")


# -- DSL-template plug-ins ---------------------------------------------------------


def artifact_hint(description):
    """The backtick-quoted artifact inside a task description, if any."""
    match = _ARTIFACT.search(description)
    return match.group(1).strip() if match else None


class TemplateImplementer:
    """Emits the artifact quoted in the task description.

    After a failed attempt it falls back to the reference artifact from the
    knowledge base when that reference was accepted.
    """

    def implement(self, task, reference, feedback, attempt):
        hint = artifact_hint(task.description)
        if feedback is not None and not feedback.success:
            if reference is not None and reference.feedback.success:
                return reference.artifact
        return hint if hint is not None else task.description


class FactorEvaluator:
    """Accepts a formula that parses, evaluates and covers enough of the panel."""

    def __init__(self, panel, min_coverage=0.5, max_window=None):
        self.panel = panel
        self.min_coverage = min_coverage
        self.max_window = max_window

    def check(self, task, artifact):
        try:
            expr = parse(artifact)
            values = evaluate(expr, self.panel, task.task_id, self.max_window)
        except DslError as exc:
            return AttemptFeedback(False, f"formula rejected: {exc}")
        except MarketError as exc:
            return AttemptFeedback(False, f"evaluation failed: {exc}")
        finite = np.isfinite(values.values)
        coverage = float(finite.mean()) if finite.size else 0.0
        if coverage < self.min_coverage:
            return AttemptFeedback(
                False, f"only {coverage:.1%} of cells are defined", {"coverage": coverage}
            )
        present = values.values[finite]
        if np.ptp(present) == 0:
            return AttemptFeedback(False, "factor is constant", {"coverage": coverage})
        return AttemptFeedback(True, "ok", {"coverage": coverage})


class ModelSpecEvaluator:
    """Accepts a JSON ModelSpec artifact."""

    def check(self, task, artifact):
        try:
            ModelSpec.from_dict(json.loads(artifact))
        except (ValueError, TypeError) as exc:
            return AttemptFeedback(False, f"model spec is not JSON: {exc}")
        except MarketError as exc:
            return AttemptFeedback(False, str(exc))
        return AttemptFeedback(True, "ok")
