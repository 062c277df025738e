import pytest

from evolvekit.artifacts import ArtifactKind
from evolvekit.drift import three_drift_suite
from evolvekit.errors import InvalidPlan
from evolvekit.evidence import TaskInput, Trajectory, TrajectoryStep
from evolvekit.evolver import (
    BudgetUsage,
    EvolveBudget,
    ScriptedEvolver,
    diagnose,
    infer_drift,
    plan,
    run_evolution_step,
    synthesize_update,
    update_parametric,
    validate_plan,
)
from evolvekit.harness import run_suite
from evolvekit.updates import EditAction, EditPlan
from evolvekit.workspace import Workspace

from conftest import tid, tool


def failing(ep, error):
    steps = (TrajectoryStep(0, "model_output", {"abort": error}, True),)
    return Trajectory(ep, TaskInput(ep, "call the api"), steps).with_score(0.0)


def passing(ep):
    return Trajectory(ep, TaskInput(ep, "call the api"), (TrajectoryStep(0, "model_output", {"complete": 1}),)).with_score(1.0)


@pytest.fixture
def ws(sandbox):
    return Workspace.in_memory(sandbox=sandbox)


def fill(ws, trajs):
    for t in trajs:
        ws.evidence.record_trajectory(t)


def test_auth_failures_yield_four_action_plan(ws):
    fill(ws, [failing(i, "HTTP 401 Unauthorized") if i % 2 else passing(i) for i in range(10)])
    out = run_evolution_step(ws, 9, EvolveBudget(), ScriptedEvolver())
    assert out.c == 1 and out.status == "committed"
    acts = out.plan.actions
    assert [a.target_kind for a in acts] == [ArtifactKind.TOOL, ArtifactKind.TOOL, ArtifactKind.KNOWLEDGE, ArtifactKind.KNOWLEDGE]
    assert acts[2].depends_on == (0,)
    assert [r.record_kind for r in ws.audit] == ["proposal", "verification", "commit"]


def test_no_failures_is_a_noop_without_audit(ws):
    fill(ws, [passing(i) for i in range(10)])
    snap = ws.registry.current_snapshot_id()
    out = run_evolution_step(ws, 9, EvolveBudget(), ScriptedEvolver())
    assert out.status == "noop" and out.c == 0
    assert ws.registry.current_snapshot_id() == snap and len(ws.audit) == 0


def test_single_failure_below_threshold(ws):
    fill(ws, [failing(0, "weird error")] + [passing(i) for i in range(1, 10)])
    out = run_evolution_step(ws, 9, EvolveBudget(), ScriptedEvolver())
    assert out.diagnosis.is_noop() and len(ws.audit) == 0


def test_repeated_failure_becomes_fact(ws):
    fill(ws, [failing(i, "quota exceeded for region") for i in range(10)])
    out = run_evolution_step(ws, 9, EvolveBudget(), ScriptedEvolver())
    assert out.c == 1 and out.plan.actions[0].target_id.name.startswith("known_failure_")
    again = run_evolution_step(ws, 9, EvolveBudget(), ScriptedEvolver())
    assert again.status == "noop"


def test_always_broken_exhausts_repairs(ws):
    fill(ws, [failing(i, "HTTP 401 Unauthorized") for i in range(10)])
    snap = ws.registry.current_snapshot_id()
    out = run_evolution_step(ws, 9, EvolveBudget(max_repair_attempts=3), ScriptedEvolver(always_broken=True))
    assert out.synthesis_attempts == 4 and out.c == 0 and out.status == "verification_failed"
    assert ws.registry.current_snapshot_id() == snap
    kinds = [r.record_kind for r in ws.audit]
    assert kinds == ["proposal"] + ["verification"] * 4 + ["rejection"]


def test_budget_exhaustion_is_a_rejection(ws):
    fill(ws, [failing(i, "HTTP 401 Unauthorized") for i in range(10)])
    out = run_evolution_step(ws, 9, EvolveBudget(max_backend_calls=2), ScriptedEvolver())
    assert out.status == "budget_exhausted" and out.c == 0
    assert [r.record_kind for r in ws.audit] == ["proposal", "rejection"]


def test_human_gate_non_interactive_rejects(ws):
    fill(ws, [failing(i, "HTTP 401 Unauthorized") for i in range(10)])
    out = run_evolution_step(ws, 9, EvolveBudget(), ScriptedEvolver(), gate_mode="human")
    assert out.status == "review_rejected" and out.c == 0
    assert [r.record_kind for r in ws.audit][-2:] == ["review", "rejection"]


def test_human_gate_interactive_waits(ws):
    fill(ws, [failing(i, "HTTP 401 Unauthorized") for i in range(10)])
    out = run_evolution_step(ws, 9, EvolveBudget(), ScriptedEvolver(), gate_mode="human", interactive=True)
    assert out.status == "pending_review" and ws.reviews.get(out.ticket.ticket_id).status == "pending"


def test_forward_dependency_rejected(ws):
    snap = ws.registry.take_snapshot()
    bad = EditPlan("d", (EditAction("add", ArtifactKind.KNOWLEDGE, "a", {}, depends_on=(1,)),
                         EditAction("add", ArtifactKind.KNOWLEDGE, "b", {})))
    with pytest.raises(InvalidPlan) as exc:
        validate_plan(bad, snap, ws.registry)
    assert exc.value.rule == "backward_dependencies"


@pytest.mark.parametrize("actions,rule", [
    ((), "non_empty"),
    ((EditAction("mutate", ArtifactKind.KNOWLEDGE, "a", {}),), "known_operator"),
    ((EditAction("add", ArtifactKind.KNOWLEDGE, "Bad Name", {}),), "valid_target"),
    ((EditAction("add", ArtifactKind.KNOWLEDGE, "a", {}), EditAction("add", ArtifactKind.KNOWLEDGE, "a", {})),
     "single_write_per_target"),
    ((EditAction("add", ArtifactKind.KNOWLEDGE, "log_schema", {}),), "fresh_add_target"),
    ((EditAction("patch", ArtifactKind.KNOWLEDGE, "missing", {}),), "active_target"),
])
def test_plan_rules(ws, actions, rule):
    with pytest.raises(InvalidPlan) as exc:
        validate_plan(EditPlan("d", actions), ws.registry.take_snapshot(), ws.registry)
    assert exc.value.rule == rule


def test_patch_of_pruned_tool_rejected(ws):
    ws.registry.put_artifact("tool", "old", tool())
    ws.registry.prune_artifact(tid("old"))
    with pytest.raises(InvalidPlan) as exc:
        validate_plan(EditPlan("d", (EditAction("patch", ArtifactKind.TOOL, "old", {}),)),
                      ws.registry.take_snapshot(), ws.registry)
    assert exc.value.rule == "active_target"


def test_synthesis_bijection(ws):
    fill(ws, [failing(i, "HTTP 401 Unauthorized") for i in range(10)])
    usage = BudgetUsage(EvolveBudget())
    snap = ws.registry.take_snapshot()
    backend = ScriptedEvolver()
    d = diagnose(ws.evidence.evidence_window(9), snap, backend, usage, ws.registry)
    p = plan(d, snap, backend, usage, ws.registry)
    cand = synthesize_update(p, snap, backend, usage, ws.registry)
    assert [w.action_index for w in cand.writes] == list(range(len(p.actions)))
    assert [w.target for w in cand.writes] == [a.target_id for a in p.actions]
    tools = [w for w in cand.writes if w.target.kind == ArtifactKind.TOOL]
    assert all(w.payload.attached_checks for w in tools)
    assert usage.backend_calls == 3


def test_drift_diagnosis_on_three_drift(sandbox):
    env = three_drift_suite()
    run = run_suite("no_evolution", env, 10, sandbox=sandbox)
    ws = run.workspace
    usage = BudgetUsage(EvolveBudget())
    d = diagnose(ws.evidence.evidence_window(9), ws.registry.take_snapshot(), ScriptedEvolver(), usage, ws.registry)
    assert d.objective == "schema drift: latency_ms renamed"
    assert d.details["new_path"] == "latency_millis"


def test_infer_drift_shapes():
    paths = {"endpoint": ["endpoint"], "latency_ms": ["latency_ms"], "status": ["status"]}
    recs = [{"request": {"endpoint": "/a"}, "latency_ms": 1.0, "status": 200}]
    assert infer_drift("endpoint", recs, paths) == ("nested", "request.endpoint")
    recs = [{"route": "/a", "latency_ms": 1.0, "status": 200}]
    assert infer_drift("endpoint", recs, paths) == ("renamed", "route")
    recs = [{"endpoint": "/a", "latency_ms": 1.0}]
    assert infer_drift("status", recs, paths) is None


def test_parametric_stub_is_identity():
    handle = object()
    assert update_parametric(handle, []) is handle
