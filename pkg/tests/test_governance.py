import itertools

import pytest
from hypothesis import given, settings, strategies as st

from evolvekit.canonical import GENESIS_DIGEST
from evolvekit.errors import AlreadyResolved, ChainMismatch, NotFound, StaleCandidate, StorageFailure, UnresolvedTicket
from evolvekit.governance import (
    AuditLog,
    CommitDecision,
    ReviewQueue,
    ReviewTicket,
    VerificationReport,
    apply_update,
    decide,
    rollback,
    verify,
    verify_audit_chain,
)
from evolvekit.registry import Registry
from evolvekit.sandbox import CheckResult
from evolvekit.updates import AttachedCheck, CandidateUpdate, Write

from conftest import DOUBLE_SRC, TRIPLE_SRC, add_tool_candidate, doc, kid, smoke, tid, tool, vid


def clock():
    n = itertools.count()
    return lambda: float(next(n))


# ---- audit chain

def test_audit_chain_links_records(tmp_path):
    log = AuditLog(tmp_path, clock())
    assert verify_audit_chain(log) and log.head_digest == GENESIS_DIGEST
    log.append_audit("proposal", {"a": 1}, 0)
    log.append_audit("commit", {"b": 2}, 1)
    assert log[1].prev_digest == log[0].self_digest and log[1].offset == 1
    assert verify_audit_chain(log) and verify_audit_chain(tmp_path / "audit" / "audit.jsonl")
    again = AuditLog(tmp_path)
    assert again.head_digest == log.head_digest and len(again) == 2


def test_append_with_wrong_prev_digest():
    log = AuditLog(clock=clock())
    log.append_audit("proposal", {}, 0)
    with pytest.raises(ChainMismatch):
        log.append_audit("commit", {}, 0, prev_digest=GENESIS_DIGEST)
    assert len(log) == 1


def test_tampering_detected():
    log = AuditLog(clock=clock())
    for i in range(5):
        log.append_audit("proposal", {"i": i}, i)
    data = log.to_bytes()
    assert verify_audit_chain(data)
    assert not verify_audit_chain(data.replace(b'"i":3', b'"i":4'))
    lines = data.split(b"\n")
    assert not verify_audit_chain(b"\n".join(lines[:2] + lines[3:]))
    assert not verify_audit_chain(data[:-1])
    assert verify_audit_chain(b"")


# ---- verification

def test_valid_candidate_passes_every_stage(sandbox, registry):
    snap = registry.take_snapshot()
    report = verify(add_tool_candidate("echo"), snap, sandbox, registry)
    kinds = [c.check_kind for c in report.checks]
    assert report.overall and kinds == ["structural", "structural", "syntax", "runtime"]


def test_syntax_error_reported_and_runtime_not_executed(sandbox, registry):
    before = sandbox.executions
    report = verify(add_tool_candidate("bad", "def f(:\n"), registry.take_snapshot(), sandbox, registry)
    assert not report.overall
    failed = {c.check_id: c.detail for c in report.failures()}
    assert "syntax:tool/bad" in failed
    assert failed["runtime:validation/bad_check_1"].startswith("not executed")
    assert sandbox.executions == before


def test_regression_break_detected(sandbox, registry):
    spec = tool(DOUBLE_SRC, checks=("dbl",))
    registry.put_artifact("tool", "dbl", spec)
    registry.put_artifact("validation", "dbl", smoke(tid("dbl"), {"x": 2}, {"kind": "exact_match", "value": 4}, "regression"))
    snap = registry.take_snapshot()
    bad = CandidateUpdate("p", (Write(0, "patch", tid("dbl"), tool(TRIPLE_SRC, checks=("dbl", "dbl_check_2")), 1),),
                          (AttachedCheck("dbl_check_2", smoke(tid("dbl"))),))
    report = verify(bad, snap, sandbox, registry)
    assert [c.check_id for c in report.failures()] == ["regression:validation/dbl"]


def test_empty_candidate_is_trivially_valid(sandbox, registry):
    report = verify(CandidateUpdate("p", ()), registry.take_snapshot(), sandbox, registry)
    assert report.overall and len(report.checks) == 1


def test_tool_without_check_fails_structurally(sandbox, registry):
    cand = CandidateUpdate("p", (Write(0, "add", tid("t"), tool()),))
    report = verify(cand, registry.take_snapshot(), sandbox, registry)
    assert [c.check_id for c in report.failures()] == ["structural:tool/t"]


def test_stale_candidate_raises(sandbox, registry):
    registry.put_artifact("knowledge", "n", doc())
    snap = registry.take_snapshot()
    cand = CandidateUpdate("p", (Write(0, "patch", kid("n"), doc("x"), 2),))
    with pytest.raises(StaleCandidate):
        verify(cand, snap, sandbox, registry)


def test_verify_does_not_touch_state(sandbox, registry):
    registry.put_artifact("knowledge", "n", doc())
    fp = registry.fingerprint()
    verify(add_tool_candidate("echo"), registry.take_snapshot(), sandbox, registry)
    assert registry.fingerprint() == fp


# ---- decision

def report_of(passed):
    return VerificationReport("d" * 64, (CheckResult("x", "runtime", passed, ""),))


@pytest.mark.parametrize("overall,status,c", [
    (True, "approved", 1), (True, "rejected", 0), (False, "approved", 0), (False, "rejected", 0),
])
def test_decide_human_table(overall, status, c):
    t = ReviewTicket("rev_0001_x", "d" * 64, status)
    assert decide(report_of(overall), "human", t).c == c


def test_decide_auto_and_pending():
    assert decide(report_of(True)).c == 1 and decide(report_of(False)).c == 0
    with pytest.raises(UnresolvedTicket):
        decide(report_of(True), "human", ReviewTicket("r", "d"))
    with pytest.raises(UnresolvedTicket):
        decide(report_of(True), "human", None)


@given(st.lists(st.booleans(), max_size=6), st.sampled_from(["approved", "rejected"]))
def test_human_never_exceeds_auto(passes, status):
    rep = VerificationReport("d" * 64, tuple(CheckResult(str(i), "runtime", p, "") for i, p in enumerate(passes)))
    assert decide(rep, "human", ReviewTicket("r", "d", status)).c <= decide(rep).c


# ---- apply

def four_write_candidate(registry):
    registry.put_artifact("knowledge", "old", doc())
    registry.put_artifact("knowledge", "gone", doc())
    registry.put_artifact("tool", "dbl", tool(DOUBLE_SRC))
    writes = (
        Write(0, "add", kid("new"), doc("fresh")),
        Write(1, "patch", kid("old"), doc("edited"), 1),
        Write(2, "prune", kid("gone"), None, 1),
        Write(3, "add", tid("echo"), tool(checks=("echo_check_1",))),
    )
    return CandidateUpdate("p", writes, (AttachedCheck("echo_check_1", smoke(tid("echo"))),))


def test_apply_four_writes(sandbox, registry):
    cand = four_write_candidate(registry)
    snap = registry.take_snapshot()
    audit = AuditLog(clock=clock())
    report = verify(cand, snap, sandbox, registry)
    after = apply_update(registry, audit, cand, decide(report))
    cs = registry.diff_snapshots(snap, after)
    assert set(cs.added) == {kid("new"), tid("echo"), vid("echo_check_1")}
    assert cs.modified == ((kid("old"), 1, 2),) and cs.pruned == (kid("gone"),)
    assert [r.record_kind for r in audit] == ["commit"]


def test_apply_noop_writes_rejection(registry):
    cand = add_tool_candidate("echo")
    snap = registry.take_snapshot()
    audit = AuditLog(clock=clock())
    after = apply_update(registry, audit, cand, CommitDecision(0, "r", cand.digest()))
    assert after.snapshot_id == snap.snapshot_id
    assert [r.record_kind for r in audit] == ["rejection"]
    assert audit[0].payload["attached_checks"][0]["name"] == "echo_check_1"


@pytest.mark.parametrize("fail_at", range(5))
def test_apply_fault_rolls_back(tmp_path, fail_at):
    registry = Registry(tmp_path / "reg")
    cand = four_write_candidate(registry)
    registry.take_snapshot()  # the snapshot verification ran against
    before_files = {p: p.read_bytes() for p in (tmp_path / "reg").rglob("*") if p.is_file()}
    calls = itertools.count()

    def hook(op, aid):
        if next(calls) == fail_at:
            raise StorageFailure("injected")

    registry.fault_hook = hook
    audit = AuditLog(clock=clock())
    with pytest.raises(StorageFailure):
        apply_update(registry, audit, cand, CommitDecision(1, "r", cand.digest()))
    registry.fault_hook = None
    assert {p: p.read_bytes() for p in (tmp_path / "reg").rglob("*") if p.is_file()} == before_files
    assert [r.record_kind for r in audit] == ["rejection"]
    assert audit[0].payload["reason"] == "storage_failure"


def test_apply_stale_is_audited(registry):
    registry.put_artifact("knowledge", "n", doc())
    cand = CandidateUpdate("p", (Write(0, "patch", kid("n"), doc("x"), 1),))
    registry.patch_artifact(kid("n"), 1, doc("someone else"))
    audit = AuditLog(clock=clock())
    with pytest.raises(StaleCandidate):
        apply_update(registry, audit, cand, CommitDecision(1, "r", cand.digest()))
    assert audit[0].payload["reason"] == "stale_candidate"


# ---- rollback and review

def test_rollback_round_trip(registry):
    audit = AuditLog(clock=clock())
    s0 = registry.take_snapshot()
    registry.put_artifact("knowledge", "n", doc())
    s1 = registry.take_snapshot()
    assert rollback(registry, audit, s0.snapshot_id).snapshot_id == s0.snapshot_id
    assert rollback(registry, audit, s1.snapshot_id).snapshot_id == s1.snapshot_id
    assert [r.record_kind for r in audit] == ["rollback", "rollback"]
    assert audit[0].payload == {"from": s1.snapshot_id, "to": s0.snapshot_id, "provenance": {}}


def test_review_transitions(tmp_path):
    q = ReviewQueue(tmp_path, clock())
    cand = add_tool_candidate("echo")
    t = q.open_ticket(cand, report_of(True), "s" * 64)
    assert t.status == "pending" and t.ticket_id.startswith("rev_0001_")
    audit = AuditLog(clock=clock())
    done = q.resolve_review(t.ticket_id, "approved", "lgtm", audit)
    assert done.status == "approved" and audit[0].record_kind == "review"
    with pytest.raises(AlreadyResolved):
        q.resolve_review(t.ticket_id, "rejected", "changed my mind")
    with pytest.raises(NotFound):
        q.get("rev_9999_x")
    assert ReviewQueue(tmp_path).get(t.ticket_id).status == "approved"
    assert CandidateUpdate.from_dict(q.entry(t.ticket_id)["candidate"]) == cand


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(["put", "patch", "noop"]), min_size=1, max_size=6))
def test_rejections_never_change_snapshot(ops):
    reg = Registry()
    audit = AuditLog(clock=clock())
    for i, op in enumerate(ops):
        if op == "put":
            reg.put_artifact("knowledge", f"n{i}", doc())
        cand = CandidateUpdate("p", (Write(0, "add", kid(f"z{i}"), doc()),))
        before = reg.current_snapshot_id()
        apply_update(reg, audit, cand, CommitDecision(0, "r", cand.digest()))
        assert reg.current_snapshot_id() == before
    assert verify_audit_chain(audit)
