"""Evolve phase: diagnose recent failures, plan edits, synthesize a candidate, gate it.

The scripted backend is a deterministic rule table so that every structural
guarantee of the loop can be exercised without a model. The remote backend
speaks three request/reply documents over HTTP.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Any, Protocol

import httpx

from .artifacts import (
    ArtifactId,
    ArtifactKind,
    KnowledgeDoc,
    Parameter,
    ToolSpec,
    ValidationCase,
    make_skill,
    payload_from_dict,
)
from .canonical import canonical_text, digest
from .drift import (
    CANONICAL_FIELDS,
    FIELD_TYPES,
    NORMALIZER_TOOL,
    SCHEMA_DOC,
    coerce,
    default_field_paths,
    leaf_paths,
    normalize_reference,
    render_normalizer,
    schema_doc,
)
from .errors import (
    BudgetExhausted,
    EvolveError,
    InvalidPayload,
    InvalidPlan,
    MalformedBackendReply,
    StaleCandidate,
    StorageFailure,
)
from .evidence import DEFAULT_WINDOW, Trajectory, mine_signatures
from .governance import (
    CommitDecision,
    ReviewTicket,
    VerificationReport,
    apply_update,
    decide,
    verify,
)
from .registry import ACTIVE, Registry, StateSnapshot, VersionedArtifact
from .updates import (
    OPERATORS,
    AttachedCheck,
    CandidateUpdate,
    Diagnosis,
    EditAction,
    EditPlan,
    Write,
    diagnosis_id,
)

STATIC_PATTERNS = ("401", "budget_exhausted", "timeout", "protocol error")
SIGNATURE_THRESHOLD = 2
_FIELD_ERROR = re.compile(r"(KeyError|TypeError): '(\w+)'")
_FLAW = "\n\ndef _unfinished(:\n    pass\n"


@dataclass(frozen=True)
class EvolveBudget:
    max_backend_calls: int = 32
    max_sandbox_executions: int = 64
    max_repair_attempts: int = 3

    def __post_init__(self):
        if self.max_backend_calls < 1 or self.max_sandbox_executions < 1 or self.max_repair_attempts < 0:
            raise ValueError("invalid evolve budget")

    def to_dict(self) -> dict:
        return {
            "max_backend_calls": self.max_backend_calls,
            "max_sandbox_executions": self.max_sandbox_executions,
            "max_repair_attempts": self.max_repair_attempts,
        }


@dataclass
class BudgetUsage:
    budget: EvolveBudget
    backend_calls: int = 0
    sandbox_executions: int = 0

    def charge_backend(self) -> None:
        if self.backend_calls >= self.budget.max_backend_calls:
            raise BudgetExhausted(f"backend call limit {self.budget.max_backend_calls} reached")
        self.backend_calls += 1

    def charge_sandbox(self) -> None:
        if self.sandbox_executions >= self.budget.max_sandbox_executions:
            raise BudgetExhausted(f"sandbox execution limit {self.budget.max_sandbox_executions} reached")
        self.sandbox_executions += 1

    def to_dict(self) -> dict:
        return {"backend_calls": self.backend_calls, "sandbox_executions": self.sandbox_executions}


View = dict[ArtifactId, VersionedArtifact]


class EvolverBackend(Protocol):
    backend_id: str

    def diagnose(self, window: list[Trajectory], view: View, window_ref: tuple[int, int]) -> Diagnosis: ...

    def plan(self, diagnosis: Diagnosis, view: View) -> EditPlan: ...

    def synthesize(self, plan: EditPlan, view: View, feedback: list[dict]) -> dict[int, dict]: ...


# ------------------------------------------------------------ scripted backend

def _failure_texts(traj: Trajectory) -> list[str]:
    out = []
    for s in traj.steps:
        if not s.is_failure:
            continue
        p = s.payload
        if isinstance(p, str):
            out.append(p)
        elif isinstance(p, dict):
            for key in ("abort", "error"):
                if isinstance(p.get(key), str):
                    out.append(p[key])
    return out


def _common_prefix(a: str, b: str) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def _compatible(value: Any, type_tag: str) -> bool:
    if type_tag == "string":
        return isinstance(value, str)
    try:
        coerce(value, type_tag)
    except TypeError:
        return False
    return True


def _schema_paths(view: View) -> dict[str, list[str]]:
    art = view.get(ArtifactId(ArtifactKind.KNOWLEDGE, SCHEMA_DOC))
    if art is not None and isinstance(art.payload.body, dict) and isinstance(art.payload.body.get("fields"), dict):
        return {k: list(v) for k, v in art.payload.body["fields"].items()}
    return default_field_paths()


def infer_drift(field_name: str, records: list[dict], field_paths: dict[str, list[str]]) -> tuple[str, str] | None:
    """Guess where a missing field went: (mutation, new path), or None."""
    known = {p for paths in field_paths.values() for p in paths}
    leaves: dict[str, list] = {}
    for rec in records:
        for path, value in leaf_paths(rec).items():
            leaves.setdefault(path, []).append(value)
    unknown = sorted(p for p in leaves if p not in known)
    own = {p.split(".")[-1] for p in field_paths.get(field_name, [field_name])}
    for u in unknown:
        if "." in u and u.split(".")[-1] in own:
            return "nested", u
    for u in unknown:
        if any(_common_prefix(u.split(".")[-1], o) >= 3 for o in own):
            return "renamed", u
    fits = [u for u in unknown if all(_compatible(v, FIELD_TYPES[field_name]) for v in leaves[u])]
    if len(fits) == 1:
        return "renamed", fits[0]
    return None


class ScriptedEvolver:
    """Rule table: field errors -> parser tool; 401s -> auth tooling; other repeats -> a fact."""

    backend_id = "scripted"

    def __init__(self, flaws: dict[str, int] | None = None, always_broken: bool = False,
                 threshold: int = SIGNATURE_THRESHOLD):
        self.flaws = dict(flaws or {})
        self.always_broken = always_broken
        self.threshold = threshold

    # -- diagnose
    def diagnose(self, window: list[Trajectory], view: View, window_ref: tuple[int, int]) -> Diagnosis:
        failing = [t for t in window if not t.success]
        if not failing:
            return Diagnosis(diagnosis_id("", (), window_ref), "", (), (), 0.0, window_ref)
        trimmed = [replace(t, steps=tuple(s for s in t.steps if s.is_failure)) for t in window]
        errors = [e for t in failing for e in _failure_texts(t)]
        sigs = mine_signatures(trimmed, list(STATIC_PATTERNS) + sorted(set(errors)))
        strong = [s for s in sigs if s.match_count >= self.threshold]
        kept = tuple(s for s in sigs if s.match_count > 0)
        if not strong:
            return Diagnosis(diagnosis_id("", kept, window_ref), "", kept, (), 0.0, window_ref)
        by_episode = {t.episode: t for t in window}

        def make(objective, implicated, sig, details):
            conf = round(sig.match_count / len(window), 6)
            return Diagnosis(diagnosis_id(objective, kept, window_ref), objective, kept, tuple(implicated),
                             conf, window_ref, details)

        if self.always_broken:
            return make("capability gap: no tool lists the available apis", [], strong[0], {"rule": "api_discovery"})

        paths = _schema_paths(view)
        for sig in strong:
            m = _FIELD_ERROR.search(sig.pattern)
            if not m or m.group(2) not in CANONICAL_FIELDS:
                continue
            error_kind, fname = m.groups()
            samples = [by_episode[e] for e in sig.sample_episodes if e in by_episode]
            records = [r for t in samples for r in t.task.attachments.get("records", [])[:4]]
            if error_kind == "TypeError":
                mutation, new_path, new_paths = "retyped", None, paths
            else:
                guess = infer_drift(fname, records, paths)
                if guess is None:
                    continue
                mutation, new_path = guess
                new_paths = dict(paths)
                new_paths[fname] = list(paths.get(fname, [fname])) + [new_path]
            implicated = [ArtifactId(ArtifactKind.KNOWLEDGE, SCHEMA_DOC)]
            if ArtifactId(ArtifactKind.TOOL, NORMALIZER_TOOL) in view:
                implicated.insert(0, ArtifactId(ArtifactKind.TOOL, NORMALIZER_TOOL))
            details = {
                "rule": "schema_drift",
                "field": fname,
                "mutation": mutation,
                "new_path": new_path,
                "field_paths": new_paths,
                "fixture": records[:3],
            }
            return make(f"schema drift: {fname} {mutation}", implicated, sig, details)

        for sig in strong:
            if "401" in sig.pattern:
                return make("authentication gap: requests fail with 401 and no tool obtains or refreshes a token",
                            [], sig, {"rule": "authentication"})

        for sig in strong:
            name = "known_failure_" + digest(sig.pattern)[:8]
            if ArtifactId(ArtifactKind.KNOWLEDGE, name) in view:
                continue
            return make(f"repeated failure: {sig.pattern[:120]}", [], sig,
                        {"rule": "repeated_failure", "pattern": sig.pattern, "fact": name})
        # every repeated failure is already on record as a fact
        weak = tuple(s for s in kept if s.match_count < self.threshold)
        return Diagnosis(diagnosis_id("", weak, window_ref), "", weak, (), 0.0, window_ref)

    # -- plan
    def plan(self, diagnosis: Diagnosis, view: View) -> EditPlan:
        rule = diagnosis.details.get("rule")
        if rule == "schema_drift":
            d = diagnosis.details
            tool_id = ArtifactId(ArtifactKind.TOOL, NORMALIZER_TOOL)
            doc_id = ArtifactId(ArtifactKind.KNOWLEDGE, SCHEMA_DOC)
            label = f"{d['field']} {d['mutation']}"
            spec = {"template": "normalizer", "label": label, "field_paths": d["field_paths"], "fixture": d["fixture"]}
            actions = [
                EditAction("patch" if tool_id in view else "add", ArtifactKind.TOOL, NORMALIZER_TOOL, spec,
                           rationale=f"parse records under the drifted layout ({label})"),
                EditAction("patch" if doc_id in view else "add", ArtifactKind.KNOWLEDGE, SCHEMA_DOC,
                           {"template": "schema_doc", "label": label, "field_paths": d["field_paths"]},
                           rationale="record the new field paths"),
            ]
            return EditPlan(diagnosis.id, tuple(actions), "tool first; schema doc mirrors the tool's field paths")
        if rule == "authentication":
            actions = (
                EditAction("add", ArtifactKind.TOOL, "discover_api_spec", {"template": "discover_api_spec"},
                           rationale="look up endpoints and their auth requirements"),
                EditAction("add", ArtifactKind.TOOL, "manage_auth_token", {"template": "manage_auth_token"},
                           rationale="obtain and cache access tokens"),
                EditAction("add", ArtifactKind.KNOWLEDGE, "systematic_api_exploration",
                           {"template": "skill", "title": "Systematic API exploration",
                            "body": "Inspect the api spec with discover_api_spec before calling unfamiliar endpoints.",
                            "triggers": ["api", "endpoint", "explore"]},
                           depends_on=(0,), rationale="workflow built on the discovery tool"),
                EditAction("add", ArtifactKind.KNOWLEDGE, "authentication_workflow",
                           {"template": "skill", "title": "Authentication workflow",
                            "body": "On a 401, call manage_auth_token and retry the request once with the new token.",
                            "triggers": ["401", "auth", "login", "token"]},
                           rationale="recover from expired or missing credentials"),
            )
            return EditPlan(diagnosis.id, actions, "skill 2 relies on tool 0")
        if rule == "repeated_failure":
            d = diagnosis.details
            words = sorted({w for w in re.findall(r"[a-z0-9]+", d["pattern"].lower()) if len(w) > 2})[:8]
            spec = {"template": "fact", "pattern": d["pattern"], "triggers": words}
            return EditPlan(diagnosis.id, (EditAction("add", ArtifactKind.KNOWLEDGE, d["fact"], spec,
                                                      rationale="remember a recurring failure"),))
        if rule == "api_discovery":
            return EditPlan(diagnosis.id, (EditAction("add", ArtifactKind.TOOL, "discover_apis",
                                                      {"template": "discover_apis"},
                                                      rationale="list available apis"),))
        return EditPlan(diagnosis.id, ())

    # -- synthesize
    def synthesize(self, plan: EditPlan, view: View, feedback: list[dict]) -> dict[int, dict]:
        """Returns, per action index, {"payload": <dict>, "check": <case dict or None>}."""
        attempt = len(feedback)
        flawed = any(key in canonical_text(plan.to_dict()) and attempt < n for key, n in self.flaws.items())
        out = {}
        for i, a in enumerate(plan.actions):
            if a.operator == "prune":
                out[i] = {"payload": None, "check": None}
                continue
            out[i] = _materialize(a, view)
            if flawed and a.target_kind == ArtifactKind.TOOL:
                out[i]["payload"]["entrypoint"] += _FLAW
        return out


_DISCOVER_SPEC = '''import json
import sys

args = json.load(sys.stdin)
service = args["service"]
spec = {"service": service, "endpoints": [], "auth": "bearer"}
print(json.dumps({"success": True, "result": spec}))
'''

_AUTH_TOKEN = '''import hashlib
import json
import sys

args = json.load(sys.stdin)
service = args["service"]
token = args.get("token") or hashlib.sha256(service.encode("utf-8")).hexdigest()[:32]
print(json.dumps({"success": True, "result": {"service": service, "token": token}}))
'''

_BROKEN_DISCOVERY = '''import json
import sys

json.load(sys.stdin)
try:
    import appworld
    apis = appworld.list_apis()
    print(json.dumps({"success": True, "result": apis}))
except Exception as exc:
    print(json.dumps({"success": False, "error": "%s: %s" % (type(exc).__name__, exc)}))
'''


def _tool(description, params, entrypoint) -> dict:
    return ToolSpec(description, tuple(Parameter(*p) for p in params), entrypoint).to_dict()


def _smoke(fixture: dict) -> dict:
    return {"check_kind": "runtime", "expectation": {"kind": "success_flag_true"}, "fixture_input": fixture}


def _materialize(a: EditAction, view: View) -> dict:
    spec = a.spec
    template = spec.get("template")
    if "payload" in spec:
        check = spec.get("check")
        if a.target_kind == ArtifactKind.TOOL and check is None:
            check = _smoke(spec.get("fixture", {}))
        return {"payload": dict(spec["payload"]), "check": check}
    if template == "normalizer":
        fp = spec["field_paths"]
        fixture = {"records": spec.get("fixture", []), "fields": list(CANONICAL_FIELDS)}
        ref = normalize_reference(fixture["records"], fixture["fields"], fp)
        expectation = {"kind": "exact_match", "value": ref.get("result")}
        payload = _tool("Map raw log records onto canonical fields (endpoint, latency_ms, status).",
                        [("records", "array", True), ("fields", "array", False)], render_normalizer(fp))
        return {"payload": payload, "check": {"check_kind": "runtime", "expectation": expectation, "fixture_input": fixture}}
    if template == "schema_doc":
        return {"payload": schema_doc(spec["field_paths"]).to_dict(), "check": None}
    if template == "discover_api_spec":
        return {"payload": _tool("Describe a service's endpoints and auth scheme.", [("service", "string", True)], _DISCOVER_SPEC),
                "check": _smoke({"service": "demo"})}
    if template == "manage_auth_token":
        return {"payload": _tool("Obtain or refresh an access token for a service.",
                                 [("service", "string", True), ("token", "string", False)], _AUTH_TOKEN),
                "check": _smoke({"service": "demo"})}
    if template == "discover_apis":
        return {"payload": _tool("List the apis available in the environment.", [], _BROKEN_DISCOVERY), "check": _smoke({})}
    if template == "skill":
        return {"payload": make_skill(a.target, spec["title"], spec["body"], spec["triggers"]).to_dict(), "check": None}
    if template == "fact":
        body = {"pattern": spec["pattern"], "note": "seen repeatedly in failed episodes"}
        return {"payload": KnowledgeDoc("fact", f"Recurring failure: {spec['pattern'][:60]}", body,
                                        tuple(spec.get("triggers", ()))).to_dict(), "check": None}
    raise MalformedBackendReply(f"no synthesis template for action {a.target!r}")


# -------------------------------------------------------------- remote backend

class RemoteEvolver:
    """Three request/reply documents: diagnose, plan, synthesize."""

    backend_id = "remote"

    def __init__(self, endpoint_config: dict, sampling_temperature: float = 0.7, max_output_tokens: int = 8192,
                 client: httpx.Client | None = None):
        self.config = dict(endpoint_config)
        self.sampling = {"temperature": sampling_temperature, "max_output_tokens": max_output_tokens}
        self.client = client

    def _call(self, stage: str, body: dict) -> dict:
        client = self.client or httpx.Client(timeout=self.config.get("timeout_s", 120.0))
        try:
            reply = client.post(self.config["url"], json={"stage": stage, "sampling": self.sampling, **body})
            reply.raise_for_status()
            doc = reply.json()
        except KeyError:
            raise MalformedBackendReply("endpoint_config has no url") from None
        except httpx.HTTPError as exc:
            raise EvolveError(f"evolver backend unavailable: {exc}") from None
        except ValueError:
            raise MalformedBackendReply(f"{stage} reply is not JSON") from None
        finally:
            if self.client is None:
                client.close()
        if not isinstance(doc, dict):
            raise MalformedBackendReply(f"{stage} reply must be an object")
        return doc

    @staticmethod
    def _state(view: View) -> list:
        return [{"id": str(a), "version": v.version, "payload": v.payload.to_dict()} for a, v in view.items()]

    def diagnose(self, window, view, window_ref):
        doc = self._call("diagnose", {"window": [t.to_dict() for t in window], "state": self._state(view),
                                      "window_ref": list(window_ref)})
        try:
            return Diagnosis.from_dict(doc["diagnosis"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedBackendReply(f"diagnosis: {exc}") from None

    def plan(self, diagnosis, view):
        doc = self._call("plan", {"diagnosis": diagnosis.to_dict(), "state": self._state(view)})
        try:
            return EditPlan.from_dict(doc["plan"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedBackendReply(f"plan: {exc}") from None

    def synthesize(self, plan, view, feedback):
        doc = self._call("synthesize", {"plan": plan.to_dict(), "state": self._state(view), "feedback": feedback})
        try:
            return {int(k): v for k, v in doc["writes"].items()}
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise MalformedBackendReply(f"synthesize: {exc}") from None


def update_parametric(policy, evidence=None):
    """Backbone weights are never updated; the handle comes back unchanged."""
    return policy


# ---------------------------------------------------------------- pipeline

def diagnose(window: list[Trajectory], snapshot: StateSnapshot, backend: EvolverBackend, usage: BudgetUsage,
             registry: Registry, W: int | None = None) -> Diagnosis:
    if not window:
        raise ValueError("diagnosis needs a non-empty window")
    usage.charge_backend()
    ref = (window[-1].episode, W or len(window))
    diag = backend.diagnose(window, registry.view(snapshot), ref)
    if any(s.match_count >= SIGNATURE_THRESHOLD for s in diag.signatures) and not diag.objective:
        raise MalformedBackendReply("repeated failures but no objective")
    if not 0.0 <= diag.confidence <= 1.0:
        raise MalformedBackendReply("confidence outside [0, 1]")
    return diag


def validate_plan(plan: EditPlan, snapshot: StateSnapshot, registry: Registry) -> None:
    """Raise InvalidPlan naming the first violated rule."""
    if not plan.actions:
        raise InvalidPlan("non_empty", "plan has no actions")
    targets = set()
    for i, a in enumerate(plan.actions):
        if a.operator not in OPERATORS:
            raise InvalidPlan("known_operator", f"action {i}: {a.operator!r}")
        if any(not isinstance(d, int) or d < 0 or d >= i for d in a.depends_on):
            raise InvalidPlan("backward_dependencies", f"action {i} depends on {list(a.depends_on)}")
        try:
            aid = a.target_id
        except InvalidPayload as exc:
            raise InvalidPlan("valid_target", f"action {i}: {exc}") from None
        if aid in targets:
            raise InvalidPlan("single_write_per_target", f"action {i}: {aid} already targeted")
        targets.add(aid)
        if a.operator == "add":
            if aid in snapshot.heads:
                raise InvalidPlan("fresh_add_target", f"action {i}: {aid} already exists")
        else:
            entry = snapshot.heads.get(aid)
            if entry is None or entry.status != ACTIVE:
                raise InvalidPlan("active_target", f"action {i}: {aid} is not active")


def plan(diagnosis: Diagnosis, snapshot: StateSnapshot, backend: EvolverBackend, usage: BudgetUsage,
         registry: Registry) -> EditPlan:
    if diagnosis.is_noop() and not diagnosis.signatures:
        raise InvalidPlan("has_objective", "nothing to plan for")
    usage.charge_backend()
    p = backend.plan(diagnosis, registry.view(snapshot))
    validate_plan(p, snapshot, registry)
    return p


def _check_name(tool: str, registry: Registry, taken: set[str]) -> str:
    n = 1
    while True:
        name = f"{tool}_check_{n}"
        if name not in taken and not registry.exists(ArtifactId(ArtifactKind.VALIDATION, name)):
            taken.add(name)
            return name
        n += 1


def synthesize_update(plan: EditPlan, snapshot: StateSnapshot, backend: EvolverBackend, usage: BudgetUsage,
                      registry: Registry, feedback: list[dict] | None = None,
                      provenance: dict | None = None) -> CandidateUpdate:
    feedback = list(feedback or [])
    usage.charge_backend()
    parts = backend.synthesize(plan, registry.view(snapshot), feedback)
    if sorted(parts) != list(range(len(plan.actions))):
        raise MalformedBackendReply("synthesis must return exactly one write per plan action")
    writes, checks, taken = [], [], set()
    for i, a in enumerate(plan.actions):
        part = parts[i]
        aid = a.target_id
        base = snapshot.heads[aid].version if a.operator != "add" else None
        if a.operator == "prune":
            writes.append(Write(i, "prune", aid, None, base))
            continue
        try:
            raw = dict(part["payload"])
            check = part.get("check")
            if aid.kind == ArtifactKind.TOOL and check is not None:
                name = _check_name(aid.name, registry, taken)
                case = ValidationCase.from_dict({**check, "targets": [str(aid)]})
                checks.append(AttachedCheck(name, case))
                raw["attached_checks"] = list(raw.get("attached_checks", [])) + [name]
            payload = payload_from_dict(aid.kind, raw)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedBackendReply(f"action {i}: {exc}") from None
        writes.append(Write(i, a.operator, aid, payload, base))
    prov = {"plan_digest": plan.digest(), "diagnosis_id": plan.diagnosis_ref, "attempt": len(feedback),
            "backend": backend.backend_id, **(provenance or {})}
    return CandidateUpdate(plan.digest(), tuple(writes), tuple(checks), prov)


# ------------------------------------------------------------ one full step

@dataclass
class StepOutcome:
    status: str
    snapshot_before: StateSnapshot
    snapshot_after: StateSnapshot
    diagnosis: Diagnosis | None = None
    plan: EditPlan | None = None
    candidate: CandidateUpdate | None = None
    report: VerificationReport | None = None
    decision: CommitDecision | None = None
    synthesis_attempts: int = 0
    ticket: ReviewTicket | None = None
    usage: dict = field(default_factory=dict)
    detail: str = ""

    @property
    def c(self) -> int:
        return self.decision.c if self.decision is not None else 0

    @property
    def repairs_used(self) -> int:
        return max(0, self.synthesis_attempts - 1)

    def summary(self) -> dict:
        return {
            "status": self.status,
            "c": self.c,
            "synthesis_attempts": self.synthesis_attempts,
            "snapshot_before": self.snapshot_before.snapshot_id,
            "snapshot_after": self.snapshot_after.snapshot_id,
            "objective": self.diagnosis.objective if self.diagnosis else "",
            "detail": self.detail,
        }


def run_evolution_step(state, end: int, budget: EvolveBudget, backend: EvolverBackend, gate_mode: str = "auto",
                       W: int = DEFAULT_WINDOW, interactive: bool = False, episode: int | None = None) -> StepOutcome:
    """Diagnose -> plan -> (synthesize -> verify) x up to 1 + repairs -> decide -> apply.

    `state` provides registry, evidence, audit, sandbox and reviews.
    """
    if gate_mode not in ("auto", "human"):
        raise ValueError(f"unknown gate mode {gate_mode!r}")
    registry, audit = state.registry, state.audit
    ep = end if episode is None else episode
    usage = BudgetUsage(budget)
    before = registry.take_snapshot(ep)
    window = state.evidence.evidence_window(end, W)
    out = StepOutcome("noop", before, before)
    proposal = None

    def propose(extra: dict) -> int:
        doc = {"snapshot_before": before.snapshot_id, "backend": backend.backend_id,
               "diagnosis": out.diagnosis.to_dict() if out.diagnosis else None,
               "plan": out.plan.to_dict() if out.plan else None, **extra}
        return audit.append_audit("proposal", doc, ep)

    def reject(reason: str, detail: str) -> StepOutcome:
        nonlocal proposal
        if proposal is None:
            proposal = propose({"error": detail})
        payload = {"reason": reason, "detail": detail, "proposal_offset": proposal,
                   "candidate_digest": out.candidate.digest() if out.candidate else None, "decision": None}
        audit.append_audit("rejection", payload, ep)
        out.status, out.detail, out.usage = reason, detail, usage.to_dict()
        return out

    try:
        out.diagnosis = diagnose(window, before, backend, usage, registry, W)
        if out.diagnosis.is_noop():
            out.usage = usage.to_dict()
            return out
        try:
            out.plan = plan(out.diagnosis, before, backend, usage, registry)
        except InvalidPlan as exc:
            return reject("invalid_plan", f"{exc.rule}: {exc}")
        proposal = propose({})
        feedback: list[dict] = []
        for attempt in range(1 + budget.max_repair_attempts):
            out.synthesis_attempts = attempt + 1
            out.candidate = synthesize_update(out.plan, before, backend, usage, registry, feedback,
                                              {"proposal_offset": proposal, "episode": ep})
            out.report = verify(out.candidate, before, state.sandbox, registry, usage.charge_sandbox)
            audit.append_audit("verification", {
                "attempt": attempt,
                "proposal_offset": proposal,
                "candidate": out.candidate.to_dict(),
                "candidate_digest": out.candidate.digest(),
                "report": out.report.to_dict(),
            }, ep)
            if out.report.overall:
                break
            feedback.append(out.report.to_dict())
    except BudgetExhausted as exc:
        return reject("budget_exhausted", str(exc))
    except MalformedBackendReply as exc:
        return reject("malformed_backend_reply", str(exc))

    out.usage = usage.to_dict()
    report, candidate = out.report, out.candidate
    if not report.overall:
        out.decision = CommitDecision(0, report.digest(), candidate.digest(), gate_mode)
        apply_update(registry, audit, candidate, out.decision, ep, reason="verification_failed")
        out.status = "verification_failed"
        return out
    if gate_mode == "human":
        ticket = state.reviews.open_ticket(candidate, report, before.snapshot_id, ep)
        if interactive:
            out.ticket, out.status = ticket, "pending_review"
            return out
        ticket = state.reviews.resolve_review(ticket.ticket_id, "rejected", "auto-rejected: non-interactive run", audit, ep)
        out.ticket = ticket
    out.decision = decide(report, gate_mode, out.ticket)
    try:
        out.snapshot_after = apply_update(registry, audit, candidate, out.decision, ep, reason="review_rejected")
    except (StorageFailure, StaleCandidate) as exc:
        out.status, out.detail = "storage_failure" if isinstance(exc, StorageFailure) else "stale_candidate", str(exc)
        out.decision = replace(out.decision, c=0)
        out.snapshot_after = registry.take_snapshot(ep)
        return out
    out.status = "committed" if out.decision.c else "review_rejected"
    return out


def finalize_review(state, ticket_id: str, verdict: str, note: str, episode: int = 0) -> StepOutcome:
    """Resolve a pending ticket and apply (or reject) the candidate it holds."""
    registry, audit = state.registry, state.audit
    ticket = state.reviews.resolve_review(ticket_id, verdict, note, audit, episode)
    entry = state.reviews.entry(ticket_id)
    candidate = CandidateUpdate.from_dict(entry["candidate"])
    report = VerificationReport.from_dict(entry["report"])
    before = registry.take_snapshot(episode)
    out = StepOutcome("review_rejected", before, before, candidate=candidate, report=report, ticket=ticket)
    out.decision = decide(report, "human", ticket)
    if out.decision.c and before.snapshot_id != entry["snapshot_id"]:
        audit.append_audit("rejection", {"reason": "stale_candidate", "candidate_digest": candidate.digest(),
                                         "decision": out.decision.to_dict(),
                                         "detail": "state moved since the review was opened"}, episode)
        out.decision = replace(out.decision, c=0)
        out.status = "stale_candidate"
        return out
    try:
        out.snapshot_after = apply_update(registry, audit, candidate, out.decision, episode, reason="review_rejected")
    except (StorageFailure, StaleCandidate) as exc:
        out.decision = replace(out.decision, c=0)
        out.status, out.detail = "storage_failure", str(exc)
        return out
    out.status = "committed" if out.decision.c else "review_rejected"
    return out
