"""Commit gate: verify a candidate, decide c in {0, 1}, apply atomically, audit everything."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from .artifacts import ArtifactId, ArtifactKind, ToolSpec, check_payload
from .canonical import GENESIS_DIGEST, canonical_bytes, digest, digest_bytes, loads
from .errors import (
    AlreadyResolved,
    ChainMismatch,
    EvolveError,
    InvalidPayload,
    NotFound,
    StaleCandidate,
    StorageFailure,
    UnresolvableTarget,
    UnresolvedTicket,
)
from .registry import ACTIVE, Registry, StateSnapshot
from .sandbox import CheckResult, Sandbox, dry_parse
from .updates import CandidateUpdate

RECORD_KINDS = ("proposal", "verification", "commit", "rejection", "rollback", "review")
_RECORD_FIELDS = ("offset", "timestamp", "episode", "record_kind", "payload", "prev_digest", "self_digest")


# ---------------------------------------------------------------- audit log

@dataclass(frozen=True)
class AuditRecord:
    offset: int
    timestamp: float
    episode: int
    record_kind: str
    payload: dict
    prev_digest: str
    self_digest: str

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in _RECORD_FIELDS}


def record_digest(prev_digest: str, offset: int, timestamp, episode: int, record_kind: str, payload) -> str:
    body = {"offset": offset, "timestamp": timestamp, "episode": episode, "record_kind": record_kind, "payload": payload}
    return digest_bytes(prev_digest.encode("ascii") + canonical_bytes(body))


class AuditLog:
    """Hash-chained, append-only log persisted as one canonical JSON object per line."""

    def __init__(self, root: str | Path | None = None, clock: Callable[[], float] | None = None):
        self.path = Path(root) / "audit" / "audit.jsonl" if root is not None else None
        self.clock = clock or time.time
        self._records: list[AuditRecord] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_bytes().split(b"\n"):
                if line:
                    self._records.append(AuditRecord(**loads(line)))

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(list(self._records))

    def __getitem__(self, i: int) -> AuditRecord:
        return self._records[i]

    @property
    def head_digest(self) -> str:
        return self._records[-1].self_digest if self._records else GENESIS_DIGEST

    def append_audit(self, record_kind: str, payload: dict, episode: int = 0, prev_digest: str | None = None) -> int:
        if record_kind not in RECORD_KINDS:
            raise ValueError(f"unknown record kind {record_kind!r}")
        with self._lock:
            tail = self.head_digest
            if prev_digest is not None and prev_digest != tail:
                raise ChainMismatch(f"prev_digest {prev_digest[:12]}... does not match tail {tail[:12]}...")
            offset = len(self._records)
            ts = self.clock()
            rec = AuditRecord(offset, ts, int(episode), record_kind, payload, tail,
                              record_digest(tail, offset, ts, int(episode), record_kind, payload))
            line = canonical_bytes(rec.to_dict())
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "ab") as fh:
                    fh.write(line + b"\n")
            self._records.append(rec)
            return offset

    def to_bytes(self) -> bytes:
        return b"".join(canonical_bytes(r.to_dict()) + b"\n" for r in self._records)

    def count(self, record_kind: str, since: int = 0) -> int:
        return sum(1 for r in self._records[since:] if r.record_kind == record_kind)


def append_audit(log: AuditLog, record_kind: str, payload: dict, episode: int = 0, prev_digest: str | None = None) -> int:
    return log.append_audit(record_kind, payload, episode, prev_digest)


def verify_audit_chain(log: AuditLog | bytes | str | Path) -> bool:
    """True iff every line is canonical, offsets are dense and every digest recomputes."""
    if isinstance(log, AuditLog):
        data = log.to_bytes()
    elif isinstance(log, (str, Path)):
        p = Path(log)
        data = p.read_bytes() if p.exists() else b""
    else:
        data = bytes(log)
    if not data:
        return True
    if not data.endswith(b"\n"):
        return False
    prev = GENESIS_DIGEST
    for i, line in enumerate(data[:-1].split(b"\n")):
        try:
            doc = loads(line)
        except ValueError:
            return False
        if not isinstance(doc, dict) or sorted(doc) != sorted(_RECORD_FIELDS):
            return False
        try:
            if canonical_bytes(doc) != line:
                return False
        except (TypeError, ValueError):
            return False
        if doc["offset"] != i or doc["prev_digest"] != prev or doc["record_kind"] not in RECORD_KINDS:
            return False
        if type(doc["offset"]) is not int or type(doc["episode"]) is not int:
            return False
        expected = record_digest(prev, doc["offset"], doc["timestamp"], doc["episode"], doc["record_kind"], doc["payload"])
        if doc["self_digest"] != expected:
            return False
        prev = expected
    return True


# ------------------------------------------------------------ verification

@dataclass(frozen=True)
class VerificationReport:
    candidate_digest: str
    checks: tuple[CheckResult, ...]

    @property
    def overall(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self, timing: bool = False) -> dict:
        return {
            "candidate_digest": self.candidate_digest,
            "checks": [c.to_dict(timing) for c in self.checks],
            "overall": self.overall,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        checks = tuple(CheckResult(c["check_id"], c["check_kind"], c["passed"], c.get("detail", ""), c.get("duration_ms", 0.0))
                       for c in d["checks"])
        return cls(d["candidate_digest"], checks)

    def digest(self) -> str:
        return digest(self.to_dict())


def _check_bases(candidate: CandidateUpdate, heads) -> None:
    for w in candidate.writes:
        if w.operator in ("patch", "refactor", "prune"):
            entry = heads.get(w.target)
            if entry is None or entry.version != w.base_version:
                have = None if entry is None else entry.version
                raise StaleCandidate(f"{w.target}: candidate based on v{w.base_version}, state has v{have}")


def shadow_state(registry: Registry, snapshot: StateSnapshot, candidate: CandidateUpdate) -> dict:
    """Active payloads of `snapshot` with the candidate applied; nothing is written."""
    shadow = {aid: art.payload for aid, art in registry.view(snapshot).items()}
    for w in candidate.writes:
        if w.operator == "prune":
            shadow.pop(w.target, None)
        elif w.payload is not None:
            shadow[w.target] = w.payload
    for chk in candidate.attached_checks:
        shadow[chk.id] = chk.case
    return shadow


def verify(
    candidate: CandidateUpdate,
    snapshot: StateSnapshot,
    sandbox: Sandbox,
    registry: Registry,
    charge_sandbox: Callable[[], None] | None = None,
) -> VerificationReport:
    """Structural, syntax, runtime and regression checks, all of them always run."""
    registry.require_snapshot(snapshot.snapshot_id)
    _check_bases(candidate, snapshot.heads)
    charge = charge_sandbox or (lambda: None)
    checks: list[CheckResult] = []
    shadow = shadow_state(registry, snapshot, candidate)
    attached_names = {c.name for c in candidate.attached_checks}

    # (1) structural
    if not candidate.writes:
        checks.append(CheckResult("structural", "structural", True, "no writes"))
    seen = set()
    for w in candidate.writes:
        cid = f"structural:{w.target}"
        try:
            _structural(w, registry, snapshot, candidate, attached_names, seen)
        except (InvalidPayload, EvolveError) as exc:
            checks.append(CheckResult(cid, "structural", False, str(exc)))
        else:
            checks.append(CheckResult(cid, "structural", True, "ok"))
    for chk in candidate.attached_checks:
        cid = f"structural:{chk.id}"
        try:
            if chk.id in snapshot.heads:
                raise InvalidPayload(f"{chk.id} already exists")
            check_payload(ArtifactKind.VALIDATION, chk.case)
            missing = [str(t) for t in chk.case.targets if t not in shadow]
            if missing:
                raise InvalidPayload(f"unresolvable targets: {', '.join(missing)}")
        except InvalidPayload as exc:
            checks.append(CheckResult(cid, "structural", False, str(exc)))
        else:
            checks.append(CheckResult(cid, "structural", True, "ok"))

    # (2) syntax
    unparsable = set()
    for w in candidate.writes:
        if isinstance(w.payload, ToolSpec):
            res = dry_parse(w.payload, f"syntax:{w.target}")
            checks.append(res)
            if not res.passed:
                unparsable.add(w.target)

    # (3) runtime, via the checks the candidate attaches
    for chk in candidate.attached_checks:
        checks.append(_run_case(f"runtime:{chk.id}", chk.case, shadow, sandbox, unparsable, charge))

    # (4) regression: stored cases touching anything written
    written = set(candidate.written_ids())
    pruned = {w.target for w in candidate.writes if w.operator == "prune"}
    for aid, art in registry.view(snapshot).items():
        if aid.kind != ArtifactKind.VALIDATION or aid in written:
            continue
        case = art.payload
        targets = set(case.targets)
        if not targets & written or targets & pruned:
            continue
        checks.append(_run_case(f"regression:{aid}", case, shadow, sandbox, unparsable, charge))

    return VerificationReport(candidate.digest(), tuple(checks))


def _structural(w, registry: Registry, snapshot: StateSnapshot, candidate, attached_names, seen) -> None:
    if w.target in seen:
        raise InvalidPayload(f"{w.target} written twice")
    seen.add(w.target)
    if w.operator == "add":
        if w.target in snapshot.heads:
            raise InvalidPayload(f"{w.target} already exists")
    elif w.operator in ("patch", "refactor", "prune"):
        entry = snapshot.heads.get(w.target)
        if entry is None or entry.status != ACTIVE:
            raise InvalidPayload(f"{w.target} is not an active artifact")
    else:
        raise InvalidPayload(f"unknown operator {w.operator!r}")
    if w.operator == "prune":
        return
    if w.payload is None:
        raise InvalidPayload(f"{w.operator} of {w.target} carries no payload")
    check_payload(w.target.kind, w.payload)
    if isinstance(w.payload, ToolSpec):
        runtime = [c for c in candidate.attached_checks
                   if c.case.check_kind in ("runtime", "regression") and w.target in c.case.targets]
        if not runtime:
            raise InvalidPayload(f"tool {w.target} has no attached runtime check")
        for ref in w.payload.attached_checks:
            ref_id = ArtifactId(ArtifactKind.VALIDATION, ref)
            if ref not in attached_names and ref_id not in snapshot.heads:
                raise InvalidPayload(f"tool {w.target} lists unknown check {ref!r}")


def _run_case(check_id, case, shadow, sandbox: Sandbox, unparsable, charge) -> CheckResult:
    broken = [str(t) for t in case.targets if t in unparsable]
    if broken and case.check_kind in ("runtime", "regression"):
        return CheckResult(check_id, case.check_kind, False, f"not executed: entrypoint does not parse ({', '.join(broken)})")
    if case.check_kind in ("runtime", "regression"):
        charge()
    try:
        res = sandbox.run_validation_case(case, shadow, check_id=check_id)
    except UnresolvableTarget as exc:
        return CheckResult(check_id, case.check_kind, False, f"unresolvable target {exc}")
    return res


# ---------------------------------------------------------------- decision

@dataclass(frozen=True)
class ReviewTicket:
    ticket_id: str
    update_ref: str
    status: str = "pending"
    reviewer_note: str = ""
    resolved_at: float | None = None

    def to_dict(self) -> dict:
        return {
            "ticket_id": self.ticket_id,
            "update_ref": self.update_ref,
            "status": self.status,
            "reviewer_note": self.reviewer_note,
            "resolved_at": self.resolved_at,
        }


@dataclass(frozen=True)
class CommitDecision:
    c: int
    report_ref: str
    candidate_ref: str
    mode: str = "auto"
    review_ref: str | None = None

    def to_dict(self) -> dict:
        return {"c": self.c, "report_ref": self.report_ref, "candidate_ref": self.candidate_ref,
                "mode": self.mode, "review_ref": self.review_ref}


def decide(report: VerificationReport, gate_mode: str = "auto", ticket: ReviewTicket | None = None) -> CommitDecision:
    """A human may veto a passing candidate; nobody can pass a failing one."""
    if gate_mode == "auto":
        return CommitDecision(int(report.overall), report.digest(), report.candidate_digest, "auto")
    if gate_mode != "human":
        raise ValueError(f"unknown gate mode {gate_mode!r}")
    if ticket is None or ticket.status == "pending":
        raise UnresolvedTicket("human gate needs a resolved review ticket")
    c = int(report.overall and ticket.status == "approved")
    return CommitDecision(c, report.digest(), report.candidate_digest, "human", ticket.ticket_id)


class ReviewQueue:
    """Pending human reviews; each ticket keeps the candidate and report it refers to."""

    def __init__(self, root: str | Path | None = None, clock: Callable[[], float] | None = None):
        self.path = Path(root) / "reviews" / "tickets.json" if root is not None else None
        self.clock = clock or time.time
        self._entries: dict[str, dict] = {}
        if self.path is not None and self.path.exists():
            for e in loads(self.path.read_bytes()):
                self._entries[e["ticket"]["ticket_id"]] = e

    def _save(self) -> None:
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_bytes(canonical_bytes(list(self._entries.values())))

    def open_ticket(self, candidate: CandidateUpdate, report: VerificationReport, snapshot_id: str, episode: int = 0) -> ReviewTicket:
        ref = candidate.digest()
        ticket = ReviewTicket(f"rev_{len(self._entries) + 1:04d}_{ref[:8]}", ref)
        self._entries[ticket.ticket_id] = {
            "ticket": ticket.to_dict(),
            "candidate": candidate.to_dict(),
            "report": report.to_dict(),
            "snapshot_id": snapshot_id,
            "episode": episode,
        }
        self._save()
        return ticket

    def get(self, ticket_id: str) -> ReviewTicket:
        try:
            return ReviewTicket(**self._entries[ticket_id]["ticket"])
        except KeyError:
            raise NotFound(ticket_id) from None

    def entry(self, ticket_id: str) -> dict:
        self.get(ticket_id)
        return self._entries[ticket_id]

    def tickets(self, status: str | None = None) -> list[ReviewTicket]:
        out = [ReviewTicket(**e["ticket"]) for e in self._entries.values()]
        return [t for t in out if status is None or t.status == status]

    def resolve_review(self, ticket_id: str, verdict: str, note: str, audit: AuditLog | None = None, episode: int = 0) -> ReviewTicket:
        if verdict not in ("approved", "rejected"):
            raise ValueError("verdict must be approved or rejected")
        ticket = self.get(ticket_id)
        if ticket.status != "pending":
            raise AlreadyResolved(f"{ticket_id} is already {ticket.status}")
        ticket = replace(ticket, status=verdict, reviewer_note=note, resolved_at=self.clock())
        self._entries[ticket_id]["ticket"] = ticket.to_dict()
        self._save()
        if audit is not None:
            audit.append_audit("review", {"ticket": ticket.to_dict()}, episode)
        return ticket


# ------------------------------------------------------------------- apply

def _rejection_payload(candidate: CandidateUpdate, decision: CommitDecision | None, reason: str, extra: dict | None = None) -> dict:
    doc = {
        "candidate_digest": candidate.digest(),
        "reason": reason,
        "decision": None if decision is None else decision.to_dict(),
        # rejected candidates' tests are kept only here, for later diagnosis
        "attached_checks": [c.to_dict() for c in candidate.attached_checks],
    }
    if extra:
        doc.update(extra)
    return doc


def apply_update(
    registry: Registry,
    audit: AuditLog,
    candidate: CandidateUpdate,
    decision: CommitDecision,
    episode: int = 0,
    reason: str = "verification_failed",
) -> StateSnapshot:
    """pi_{t+1} = pi_t (+) c*Delta. Exactly one commit or rejection record is written."""
    if decision.candidate_ref != candidate.digest():
        raise ValueError("decision does not refer to this candidate")
    before = registry.take_snapshot(episode)
    if decision.c == 0:
        audit.append_audit("rejection", _rejection_payload(candidate, decision, reason), episode)
        return before
    try:
        _check_bases(candidate, registry.heads())
    except StaleCandidate as exc:
        audit.append_audit("rejection", _rejection_payload(candidate, decision, "stale_candidate", {"detail": str(exc)}), episode)
        raise
    provenance = candidate.provenance.get("proposal_offset")
    try:
        with registry.transaction():
            for w in candidate.writes:
                if w.operator == "add":
                    registry.put_artifact(w.target.kind, w.target.name, w.payload, provenance, episode)
                elif w.operator in ("patch", "refactor"):
                    registry.patch_artifact(w.target, w.base_version, w.payload, provenance, episode)
                else:
                    registry.prune_artifact(w.target, provenance, episode)
            for chk in candidate.attached_checks:
                registry.put_artifact(ArtifactKind.VALIDATION, chk.name, chk.case, provenance, episode)
    except Exception as exc:
        audit.append_audit("rejection", _rejection_payload(candidate, decision, "storage_failure", {"detail": str(exc)}), episode)
        if isinstance(exc, StorageFailure):
            raise
        raise StorageFailure(f"apply aborted: {exc}") from exc
    after = registry.take_snapshot(episode)
    changes = registry.diff_snapshots(before, after)
    audit.append_audit("commit", {
        "candidate_digest": candidate.digest(),
        "decision": decision.to_dict(),
        "snapshot_before": before.snapshot_id,
        "snapshot_after": after.snapshot_id,
        "changes": changes.to_dict(),
    }, episode)
    return after


def rollback(registry: Registry, audit: AuditLog, snapshot_id: str, provenance: dict | None = None, episode: int = 0) -> StateSnapshot:
    target = registry.require_snapshot(snapshot_id)
    before = registry.take_snapshot(episode)
    restored = registry.restore_snapshot(target.snapshot_id)
    audit.append_audit("rollback", {
        "from": before.snapshot_id,
        "to": restored.snapshot_id,
        "provenance": provenance or {},
    }, episode)
    return restored
