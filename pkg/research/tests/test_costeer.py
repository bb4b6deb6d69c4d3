import json

import numpy as np
import pytest

from research.costeer import (
    AttemptFeedback,
    CoSteerConfig,
    FactorEvaluator,
    KnowledgeBase,
    KnowledgeEntry,
    ModelSpecEvaluator,
    TaskDag,
    TaskNode,
    TemplateImplementer,
    implement_task,
    kb_retrieve,
    run,
    token_jaccard,
    update_task_order,
    write_trace,
)
from research.exceptions import CycleDetected, InvalidParameter


def nodes(*ids, **alphas):
    return [TaskNode(i, f"task {i}", complexity_alpha=alphas.get(i, 1.0)) for i in ids]


def ones(dag):
    return {node.task_id: node.complexity_alpha for node in dag.nodes}


class EchoImplementer:
    def __init__(self):
        self.calls = []

    def implement(self, task, reference, feedback, attempt):
        self.calls.append((task.task_id, attempt, reference))
        return f"{task.task_id}#{attempt}"


class ScriptedEvaluator:
    """Fails each task a fixed number of times, then accepts it."""

    def __init__(self, failures=None, always_fail=()):
        self.remaining = dict(failures or {})
        self.always_fail = set(always_fail)

    def check(self, task, artifact):
        if task.task_id in self.always_fail:
            return AttemptFeedback(False, "rejected")
        if self.remaining.get(task.task_id, 0) > 0:
            self.remaining[task.task_id] -= 1
            return AttemptFeedback(False, "rejected")
        return AttemptFeedback(True, "ok")


def test_chain_forces_order():
    dag = TaskDag(nodes("A", "B", "C"), [("A", "B"), ("B", "C")])

    ordering = update_task_order(dag, ones(dag))

    assert ordering.order == ("A", "B", "C")
    assert ordering.weights == {("A", "B"): 1.0, ("B", "C"): 1.0}


def test_simplest_free_task_goes_first():
    dag = TaskDag(nodes("A", "B", A=3.0))

    assert update_task_order(dag, ones(dag)).order == ("B", "A")


def test_ties_break_by_id():
    dag = TaskDag(nodes("c", "a", "b"))

    assert update_task_order(dag, ones(dag)).order == ("a", "b", "c")


def test_edge_weights_are_alpha_ratios():
    dag = TaskDag(nodes("A", "B", A=2.0), [("A", "B")])

    assert update_task_order(dag, ones(dag)).weights == {("A", "B"): 2.0}


def test_remaining_subset_ignores_finished_predecessors():
    dag = TaskDag(nodes("A", "B", "C"), [("A", "B"), ("A", "C")])

    assert update_task_order(dag, {"A": 1, "B": 2, "C": 1}, ["B", "C"]).order == ("C", "B")


def test_cycle_is_detected_with_witness():
    with pytest.raises(CycleDetected) as excinfo:
        TaskDag(nodes("A", "B"), [("A", "B"), ("B", "A")])

    assert excinfo.value.cycle == ["A", "B", "A"]


def test_dag_validation():
    with pytest.raises(InvalidParameter):
        TaskDag(nodes("A", "A"))
    with pytest.raises(InvalidParameter):
        TaskDag(nodes("A"), [("A", "Z")])
    with pytest.raises(InvalidParameter):
        TaskNode("A", "x", complexity_alpha=0.5)
    with pytest.raises(InvalidParameter):
        TaskNode("A", "x", kind="strategy")
    with pytest.raises(InvalidParameter):
        CoSteerConfig(delta=0)
    with pytest.raises(InvalidParameter):
        CoSteerConfig(sim_threshold=1.5)


def test_from_tasks_reads_builds_on_references():
    dag = TaskDag.from_tasks(
        [
            TaskNode("f1", "momentum over 5 days"),
            TaskNode("f2", "volatility scaled, builds on: f1"),
            TaskNode("f3", "Builds on: f9 which does not exist"),
        ]
    )

    assert dag.edges == (("f1", "f2"),)
    assert dag.is_topological(["f1", "f3", "f2"])
    assert not dag.is_topological(["f2", "f1"])


def test_token_jaccard_example():
    assert token_jaccard("mean reversion 5 day", "mean reversion 10 day") == pytest.approx(0.6)
    assert token_jaccard("Mean-Reversion!", "mean reversion") == 1.0
    assert token_jaccard("", "") == 0.0


def entry(task_id, description, artifact="$close", success=True):
    return KnowledgeEntry(task_id, description, artifact, AttemptFeedback(success, "x"))


def test_kb_retrieve():
    cfg = CoSteerConfig()
    task = TaskNode("t", "mean reversion 5 day")

    assert kb_retrieve(KnowledgeBase(), task, cfg) is None

    kb = KnowledgeBase([entry("a", "mean reversion 10 day"), entry("b", "unrelated volume spike")])
    found = kb_retrieve(kb, task, cfg)
    assert found.entry.task_id == "a"
    assert found.similarity == pytest.approx(0.6)

    kb.append(entry("c", "mean reversion 5 day"))
    assert kb_retrieve(kb, task, cfg).similarity == 1.0


def test_kb_retrieve_threshold_is_strict_and_latest_wins_ties():
    task = TaskNode("t", "mean reversion 5 day")
    kb = KnowledgeBase([entry("a", "mean reversion 10 day"), entry("b", "mean reversion 20 day")])

    assert kb_retrieve(kb, task, CoSteerConfig(sim_threshold=0.6)) is None
    assert kb_retrieve(kb, task, CoSteerConfig()).entry.task_id == "b"


def test_kb_retrieve_never_returns_dissimilar_entries():
    rng = np.random.default_rng(0)
    words = ["mean", "reversion", "momentum", "volume", "5", "10", "day", "spread"]
    cfg = CoSteerConfig()
    for _ in range(200):
        kb = KnowledgeBase(
            entry(str(i), " ".join(rng.choice(words, size=3))) for i in range(5)
        )
        task = TaskNode("t", " ".join(rng.choice(words, size=3)))
        found = kb_retrieve(kb, task, cfg)
        if found is not None:
            assert found.similarity > cfg.sim_threshold
        else:
            assert all(
                token_jaccard(task.description, e.task_description) <= cfg.sim_threshold
                for e in kb.entries()
            )


def test_knowledge_base_save_and_load(tmp_path):
    kb = KnowledgeBase([entry("a", "first"), entry("b", "second", success=False)])
    path = tmp_path / "kb.jsonl"

    kb.save(path)
    loaded = KnowledgeBase.load(path)

    assert loaded.entries() == kb.entries()
    assert len(KnowledgeBase.load(tmp_path / "missing.jsonl")) == 0


@pytest.mark.parametrize(
    "failures,attempts,success", [(0, 1, True), (2, 3, True), (99, 10, False)]
)
def test_implement_task_counts_attempts(failures, attempts, success):
    kb = KnowledgeBase()
    task = TaskNode("t", "momentum")

    result = implement_task(
        task, kb, EchoImplementer(), ScriptedEvaluator({"t": failures}), CoSteerConfig()
    )

    assert result.success is success
    assert result.attempts == attempts
    assert len(kb) == attempts
    assert result.artifact == f"t#{attempts}"


def test_implement_task_passes_reference_to_later_attempts():
    kb = KnowledgeBase([entry("old", "momentum 5 day", artifact="Mean($close, 5)")])
    implementer = EchoImplementer()

    implement_task(
        TaskNode("t", "momentum 10 day"),
        kb,
        implementer,
        ScriptedEvaluator({"t": 1}),
        CoSteerConfig(),
    )

    first, second = implementer.calls
    assert first[2].task_id == "old"
    # the failed first attempt is now the closest entry
    assert second[2].task_id == "t"


def test_run_all_successes_keep_initial_order():
    dag = TaskDag(nodes("B", "A", "C", C=1.5), [("B", "C")])
    expected = update_task_order(dag, ones(dag)).order
    kb = KnowledgeBase()

    outcome = run(dag, EchoImplementer(), ScriptedEvaluator(), CoSteerConfig(), kb)

    assert tuple(outcome.execution_order) == expected
    assert all(r.success for r in outcome.results.values())
    assert len(kb) == 3


def test_run_reorders_after_failure():
    dag = TaskDag(nodes("A", "B"))
    cfg = CoSteerConfig(max_inner_iters=2)
    kb = KnowledgeBase()

    outcome = run(dag, EchoImplementer(), ScriptedEvaluator(always_fail={"A"}), cfg, kb)

    assert outcome.execution_order == ["A", "B", "A", "A"]
    assert [e.alpha_after for e in outcome.trace] == [1.5, 1.0, 2.0, 2.5]
    assert [e.outcome for e in outcome.trace] == ["failure", "success", "failure", "failure"]
    assert outcome.results["B"].success
    assert not outcome.results["A"].success
    assert outcome.nodes["A"].complexity_alpha == pytest.approx(1.0 + 3 * cfg.delta)
    assert len(kb) == 3 * 2 + 1
    assert outcome.task_outcomes() == [(6, False), (1, True)]


def test_failure_then_success_bumps_alpha_once():
    dag = TaskDag(nodes("A"))
    cfg = CoSteerConfig(max_inner_iters=1)

    outcome = run(dag, EchoImplementer(), ScriptedEvaluator({"A": 1}), cfg)

    assert outcome.nodes["A"].complexity_alpha == 1.5
    assert outcome.results["A"].success
    assert [e.attempt for e in outcome.trace] == [1, 2]


def test_run_trace_properties_over_random_dags():
    rng = np.random.default_rng(7)
    cfg = CoSteerConfig(max_inner_iters=2)
    for _ in range(30):
        ids = [f"t{i}" for i in range(6)]
        edges = [(ids[i], ids[j]) for i in range(6) for j in range(i + 1, 6) if rng.random() < 0.3]
        dag = TaskDag(nodes(*ids), edges)
        failures = {t: int(rng.integers(0, 7)) for t in ids}
        kb = KnowledgeBase()
        implementer = EchoImplementer()

        outcome = run(dag, implementer, ScriptedEvaluator(failures), cfg, kb)

        assert len(kb) == len(implementer.calls)
        assert len(kb) == sum(node.attempts for node in outcome.nodes.values())
        for task_id, node in outcome.nodes.items():
            events = [e for e in outcome.trace if e.task_id == task_id]
            failed = sum(1 for e in events if e.outcome == "failure")
            assert node.complexity_alpha == pytest.approx(1.0 + failed * cfg.delta)
            alphas = [e.alpha_after for e in events]
            assert alphas == sorted(alphas)
        succeeded = [t for t, r in outcome.results.items() if r.success]
        assert dag.is_topological(
            [t for t in outcome.execution_order if t in succeeded]
        )


def test_run_is_reproducible(tmp_path):
    def trace_text(name):
        dag = TaskDag(nodes("A", "B", "C"), [("A", "C")])
        outcome = run(
            dag,
            EchoImplementer(),
            ScriptedEvaluator({"A": 3, "C": 1}),
            CoSteerConfig(max_inner_iters=2),
        )
        path = tmp_path / name
        write_trace(outcome.trace, path, append=False)
        return path.read_text()

    first = trace_text("a.jsonl")
    assert first == trace_text("b.jsonl")
    event = json.loads(first.splitlines()[0])
    assert set(event) == {"step", "task_id", "attempt", "outcome", "alpha_after", "inner_attempts"}


def test_template_implementer_uses_hint_then_reference():
    implementer = TemplateImplementer()
    task = TaskNode("t", "momentum `$close/Ref($close, 5) - 1`")
    accepted = entry("old", "momentum", artifact="Mean($close, 5)")
    rejected = entry("old", "momentum", artifact="Mean($close, 5)", success=False)
    failed = AttemptFeedback(False, "bad")

    assert implementer.implement(task, None, None, 1) == "$close/Ref($close, 5) - 1"
    assert implementer.implement(task, accepted, None, 1) == "$close/Ref($close, 5) - 1"
    assert implementer.implement(task, accepted, failed, 2) == "Mean($close, 5)"
    assert implementer.implement(task, rejected, failed, 2) == "$close/Ref($close, 5) - 1"


@pytest.mark.parametrize(
    "formula,accepted",
    [
        ("$close/Ref($close, 5) - 1", True),
        ("Mean($close", False),
        ("$close - $close", False),
        ("Ref($close, 150)", False),
    ],
)
def test_factor_evaluator(small_panel, formula, accepted):
    feedback = FactorEvaluator(small_panel).check(TaskNode("t", "x"), formula)

    assert feedback.success is accepted


def test_factor_evaluator_enforces_the_lookback_limit(small_panel):
    evaluator = FactorEvaluator(small_panel, max_window=20)

    rejected = evaluator.check(TaskNode("t", "x"), "Mean($close, 30)/$close")
    accepted = evaluator.check(TaskNode("t", "x"), "Mean($close, 20)/$close")

    assert not rejected.success
    assert "lookback limit" in rejected.message
    assert accepted.success


def test_model_spec_evaluator():
    evaluator = ModelSpecEvaluator()
    task = TaskNode("m", "model", kind="model")

    spec = {"feature_transform": "zscore", "ridge_grid": [0.1], "lookback": 1}

    assert evaluator.check(task, json.dumps(spec)).success
    assert not evaluator.check(task, "{not json").success
    assert not evaluator.check(task, json.dumps({**spec, "lookback": 0})).success
    assert not evaluator.check(task, json.dumps({"lookback": 2})).success
