"""Solve phase: one episode against a frozen snapshot, under a step/tool/token budget."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any, Callable

import httpx

from .artifacts import ArtifactId, ArtifactKind, KnowledgeDoc, ToolSpec, is_identifier
from .canonical import canonical_text, digest
from .drift import NORMALIZER_TOOL, answer_from_rows, builtin_rows
from .errors import BackendUnavailable, MalformedAction, SignatureViolation
from .evidence import TaskInput, Trajectory, TrajectoryStep, Usage
from .registry import Registry, StateSnapshot
from .sandbox import Sandbox

BACKENDS = ("scripted", "remote")


@dataclass(frozen=True)
class PolicyHandle:
    backend_id: str = "scripted"
    seed: int = 0
    sampling_temperature: float = 0.7
    max_output_tokens: int = 4096
    endpoint_config: dict = field(default_factory=dict)
    script: str = "log_analyst"

    def __post_init__(self):
        if self.backend_id not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend_id!r}")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    def to_dict(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "seed": self.seed,
            "sampling_temperature": self.sampling_temperature,
            "max_output_tokens": self.max_output_tokens,
            "endpoint_config": dict(self.endpoint_config),
            "script": self.script,
        }


@dataclass(frozen=True)
class SolveBudget:
    max_steps: int = 8
    max_tool_calls: int = 4
    max_tokens: int = 100_000

    def __post_init__(self):
        if self.max_steps < 1 or self.max_tokens < 1 or self.max_tool_calls < 0:
            raise ValueError("invalid solve budget")

    def to_dict(self) -> dict:
        return {"max_steps": self.max_steps, "max_tool_calls": self.max_tool_calls, "max_tokens": self.max_tokens}


@dataclass(frozen=True)
class SolveAction:
    type: str
    name: str | None = None
    args: Any = None
    text: str | None = None
    answer: Any = None
    reason: str | None = None

    @property
    def terminal(self) -> bool:
        return self.type in ("complete", "abort")

    def to_dict(self) -> dict:
        if self.type == "tool_call":
            return {"tool_call": {"name": self.name, "args": self.args}}
        if self.type == "respond":
            return {"respond": self.text}
        if self.type == "complete":
            return {"complete": self.answer}
        return {"abort": self.reason}


def tool_call(name: str, args: dict) -> SolveAction:
    return SolveAction("tool_call", name=name, args=args)


def respond(text: str) -> SolveAction:
    return SolveAction("respond", text=text)


def complete(answer) -> SolveAction:
    return SolveAction("complete", answer=answer)


def abort(reason: str) -> SolveAction:
    return SolveAction("abort", reason=reason)


def parse_action(doc: Any) -> SolveAction:
    """Decode the wire form {"action": {<type>: ...}} into a SolveAction."""
    if not isinstance(doc, dict) or not isinstance(doc.get("action"), dict):
        raise MalformedAction("reply must be an object with an 'action' object")
    action = doc["action"]
    if len(action) != 1:
        raise MalformedAction("action must have exactly one variant key")
    (kind, body), = action.items()
    if kind == "tool_call":
        if not isinstance(body, dict) or not is_identifier(body.get("name")) or not isinstance(body.get("args"), dict):
            raise MalformedAction("tool_call needs an identifier 'name' and an object 'args'")
        return tool_call(body["name"], body["args"])
    if kind == "respond":
        if not isinstance(body, str):
            raise MalformedAction("respond needs text")
        return respond(body)
    if kind == "complete":
        return complete(body)
    if kind == "abort":
        if not isinstance(body, str):
            raise MalformedAction("abort needs a reason")
        return abort(body)
    raise MalformedAction(f"unknown action variant {kind!r}")


@dataclass(frozen=True)
class ContextBundle:
    knowledge_docs: tuple[tuple[ArtifactId, Any], ...]
    tool_signatures: tuple[tuple[str, tuple, str], ...]
    snapshot_id: str

    def tool_names(self) -> set[str]:
        return {name for name, _, _ in self.tool_signatures}

    def to_dict(self) -> dict:
        return {
            "knowledge_docs": [[str(a), body] for a, body in self.knowledge_docs],
            "tool_signatures": [
                {"name": n, "parameters": [list(p) for p in params], "description": d}
                for n, params, d in self.tool_signatures
            ],
            "snapshot_id": self.snapshot_id,
        }


def tokens_of(text: str) -> set[str]:
    return set(text.lower().split())


def build_context(registry: Registry, snapshot: StateSnapshot, task: TaskInput, limit: int = 5) -> ContextBundle:
    if limit < 1:
        raise ValueError("limit must be positive")
    view = registry.view(snapshot)
    words = tokens_of(task.description)
    scored = []
    tools = []
    for aid, art in view.items():
        if isinstance(art.payload, KnowledgeDoc):
            overlap = len(words & set(art.payload.triggers))
            if overlap:
                scored.append((-overlap, str(aid), aid, art.payload.body))
        elif isinstance(art.payload, ToolSpec):
            params = tuple((p.name, p.type_tag, p.required) for p in art.payload.parameters)
            tools.append((aid.name, params, art.payload.description))
    scored.sort(key=lambda s: (s[0], s[1]))
    docs = tuple((aid, body) for _, _, aid, body in scored[:limit])
    return ContextBundle(docs, tuple(sorted(tools)), snapshot.snapshot_id)


# ---------------------------------------------------------- scripted scripts

Script = Callable[[int, ContextBundle, TaskInput, list[TrajectoryStep]], SolveAction]


def _immediate(seed, context, task, prefix):
    return complete(task.attachments.get("answer", "done"))


def _looping(seed, context, task, prefix):
    return respond(f"thinking {len(prefix)}")


def _echo_caller(seed, context, task, prefix):
    results = [s for s in prefix if s.kind == "tool_result"]
    if not results:
        return tool_call("echo", dict(task.attachments.get("args", {"x": 1})))
    return complete(results[-1].payload.get("result"))


def _coin(seed, context, task, prefix):
    rng = random.Random(f"{seed}:{task.episode}:{len(prefix)}")
    return complete(rng.randint(0, 1)) if len(prefix) >= 2 else respond(f"draft {rng.random():.6f}")


def _log_analyst(seed, context, task, prefix):
    """Answer a log-metrics question; prefers the normalizer tool when one is present."""
    question = task.attachments["question"]
    records = task.attachments["records"]
    fields = list(question["fields"])
    results = [s for s in prefix if s.kind == "tool_result"]
    if NORMALIZER_TOOL in context.tool_names():
        if not results:
            return tool_call(NORMALIZER_TOOL, {"records": records, "fields": fields})
        last = results[-1].payload
        if not last.get("success"):
            return abort(last.get("error") or "tool failed")
        rows = last["result"]
    else:
        try:
            rows = builtin_rows(records, fields)
        except KeyError as exc:
            return abort(f"KeyError: {exc.args[0]!r}")
        except TypeError as exc:
            return abort(f"TypeError: {exc}")
    return complete(answer_from_rows(question["template"], rows))


SCRIPTS: dict[str, Script] = {
    "immediate": _immediate,
    "looping": _looping,
    "echo_caller": _echo_caller,
    "coin": _coin,
    "log_analyst": _log_analyst,
}


# ----------------------------------------------------------------- backends

def _remote_step(policy: PolicyHandle, context: ContextBundle, task: TaskInput, prefix, client: httpx.Client | None = None) -> SolveAction:
    cfg = policy.endpoint_config
    request = {
        "context": context.to_dict(),
        "task": task.to_dict(),
        "prefix": [s.to_dict() for s in prefix],
        "sampling": {"temperature": policy.sampling_temperature, "max_output_tokens": policy.max_output_tokens},
    }
    own = client is None
    client = client or httpx.Client(timeout=cfg.get("timeout_s", 60.0), headers=cfg.get("headers"))
    try:
        reply = client.post(cfg["url"], json=request)
        reply.raise_for_status()
        doc = reply.json()
    except KeyError:
        raise BackendUnavailable("endpoint_config has no url") from None
    except httpx.HTTPError as exc:
        raise BackendUnavailable(str(exc)) from None
    except ValueError:
        raise MalformedAction("reply is not a JSON document") from None
    finally:
        if own:
            client.close()
    return parse_action(doc)


def policy_step(policy: PolicyHandle, context: ContextBundle, task: TaskInput, prefix: list[TrajectoryStep],
                client: httpx.Client | None = None) -> SolveAction:
    if prefix and prefix[-1].kind == "model_output" and isinstance(prefix[-1].payload, dict) \
            and set(prefix[-1].payload) & {"complete", "abort"}:
        raise ValueError("prefix is already terminal")
    if policy.backend_id == "remote":
        return _remote_step(policy, context, task, prefix, client)
    try:
        script = SCRIPTS[policy.script]
    except KeyError:
        raise BackendUnavailable(f"no scripted policy named {policy.script!r}") from None
    return script(policy.seed, context, task, list(prefix))


# --------------------------------------------------------------- solve loop

def _words(text: str) -> int:
    return len(text.split())


def run_solve(
    policy: PolicyHandle,
    registry: Registry,
    snapshot: StateSnapshot,
    task: TaskInput,
    budget: SolveBudget,
    sandbox: Sandbox,
    context_limit: int = 5,
    client: httpx.Client | None = None,
) -> Trajectory:
    """Read-only: looks tools up in the snapshot view and never writes the registry."""
    context = build_context(registry, snapshot, task, context_limit)
    view = {aid.name: art.payload for aid, art in registry.view(snapshot).items() if aid.kind == ArtifactKind.TOOL}
    steps: list[TrajectoryStep] = []
    n_steps = n_calls = 0
    tokens = _words(task.description)

    def add(kind, payload, failure=False):
        steps.append(TrajectoryStep(len(steps), kind, payload, failure))

    def exhausted():
        add("error", "budget_exhausted", True)

    while True:
        if n_steps >= budget.max_steps or tokens > budget.max_tokens:
            exhausted()
            break
        try:
            action = policy_step(policy, context, task, steps, client)
        except MalformedAction as exc:
            add("error", f"malformed_action: {exc}", True)
            break
        cost = _words(canonical_text(action.to_dict()))
        if tokens + cost > budget.max_tokens or (action.type == "tool_call" and n_calls >= budget.max_tool_calls):
            exhausted()
            break
        n_steps += 1
        tokens += cost
        if action.type == "tool_call":
            n_calls += 1
            add("tool_call", {"name": action.name, "args": action.args})
            add("tool_result", *_invoke(view, action, sandbox))
            continue
        add("model_output", action.to_dict(), action.type == "abort")
        if action.terminal:
            break
    return Trajectory(task.episode, task, tuple(steps), 0.0, False, Usage(n_steps, n_calls, tokens))


def _invoke(view: dict[str, ToolSpec], action: SolveAction, sandbox: Sandbox) -> tuple[dict, bool]:
    tool = view.get(action.name)
    if tool is None:
        return {"success": False, "error": f"unknown tool {action.name!r}", "truncated": False}, True
    try:
        res = sandbox.execute_tool(tool, action.args)
    except SignatureViolation as exc:
        return {"success": False, "error": f"signature violation: {exc}", "truncated": False}, True
    return res.to_payload(), not res.success


def trajectory_digest(traj: Trajectory) -> str:
    return digest(traj.to_dict())
