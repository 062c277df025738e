"""Run configuration, the batch-cadence run loop and its report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .drift import SUITES, DriftEnvironment, FieldDescriptor, GeneratedTask, Mutation, generate_episode
from .errors import ConfigError, InvalidSchedule
from .evidence import DEFAULT_WINDOW
from .evolver import EvolveBudget, RemoteEvolver, ScriptedEvolver
from .harness import MetricsSummary, compute_metrics
from .loop import KINDS, LoopSettings, run_episodes
from .sandbox import Sandbox
from .solve import PolicyHandle, SolveBudget
from .workspace import Workspace


@dataclass(frozen=True)
class RunConfig:
    workspace: str = ""
    env: dict = field(default_factory=lambda: {"suite": "canonical_drift"})
    task_file: str | None = None
    episode_count: int = 30
    batch_size: int = 10
    gate_mode: str = "auto"
    solver: PolicyHandle = PolicyHandle()
    evolver: dict = field(default_factory=lambda: {"backend_id": "scripted"})
    solve_budget: SolveBudget = SolveBudget()
    evolve_budget: EvolveBudget = EvolveBudget()
    seed: int = 0
    window: int = DEFAULT_WINDOW
    kind: str = "agentic"
    interactive: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.episode_count < 0:
            raise ConfigError("episode_count must be >= 0")
        if self.gate_mode not in ("auto", "human"):
            raise ConfigError(f"gate_mode must be auto or human, got {self.gate_mode!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {', '.join(KINDS)}")
        if self.window < 1:
            raise ConfigError("window must be >= 1")

    @classmethod
    def from_dict(cls, d: Any) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        kw = dict(d)
        try:
            if "solver" in kw:
                kw["solver"] = PolicyHandle(**kw["solver"])
            if "solve_budget" in kw:
                kw["solve_budget"] = SolveBudget(**kw["solve_budget"])
            if "evolve_budget" in kw:
                kw["evolve_budget"] = EvolveBudget(**kw["evolve_budget"])
            for key in ("episode_count", "batch_size", "seed", "window"):
                if key in kw and (not isinstance(kw[key], int) or isinstance(kw[key], bool)):
                    raise ConfigError(f"{key} must be an integer")
            cfg = cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.environment()
        cfg.backend()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "workspace": self.workspace,
            "env": self.env,
            "task_file": self.task_file,
            "episode_count": self.episode_count,
            "batch_size": self.batch_size,
            "gate_mode": self.gate_mode,
            "solver": self.solver.to_dict(),
            "evolver": self.evolver,
            "solve_budget": self.solve_budget.to_dict(),
            "evolve_budget": self.evolve_budget.to_dict(),
            "seed": self.seed,
            "window": self.window,
            "kind": self.kind,
            "interactive": self.interactive,
        }

    def environment(self) -> DriftEnvironment:
        return env_from_dict(self.env, self.seed)

    def backend(self):
        spec = dict(self.evolver)
        kind = spec.pop("backend_id", "scripted")
        try:
            if kind == "scripted":
                return ScriptedEvolver(**spec)
            if kind == "remote":
                return RemoteEvolver(**spec)
        except TypeError as exc:
            raise ConfigError(f"evolver: {exc}") from None
        raise ConfigError(f"unknown evolver backend {kind!r}")

    def settings(self) -> LoopSettings:
        return LoopSettings(self.kind, self.solver, self.solve_budget, self.evolve_budget, self.gate_mode,
                            self.batch_size, self.window, self.interactive)

    def task_source(self):
        if self.task_file is None:
            env = self.environment()
            return lambda t: generate_episode(env, t, self.seed)
        try:
            lines = Path(self.task_file).read_text(encoding="utf-8").splitlines()
            tasks = [GeneratedTask.from_dict(json.loads(ln)) for ln in lines if ln.strip()]
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load task file: {exc}") from None

        def source(t):
            if t >= len(tasks):
                raise ConfigError(f"task file has no task for episode {t}")
            g = tasks[t]
            return replace(g, task=replace(g.task, episode=t))
        return source


def env_from_dict(spec: dict, seed: int = 0) -> DriftEnvironment:
    if not isinstance(spec, dict):
        raise ConfigError("env must be an object")
    try:
        if "suite" in spec:
            if spec["suite"] not in SUITES:
                raise ConfigError(f"unknown suite {spec['suite']!r}")
            return SUITES[spec["suite"]](int(spec.get("seed", seed)))
        schema = tuple(FieldDescriptor(*f) for f in spec["schema"]) if "schema" in spec else None
        schedule = tuple((int(t), Mutation(**m)) for t, m in spec.get("drift_schedule", ()))
        kw = {"drift_schedule": schedule, "records_per_task": int(spec.get("records_per_task", 24)),
              "seed": int(spec.get("seed", seed))}
        if schema is not None:
            kw["schema"] = schema
        return DriftEnvironment(**kw)
    except (InvalidSchedule, TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"env: {exc}") from None


@dataclass(frozen=True)
class RunReport:
    episodes_run: int
    evolution_steps: int
    proposals: int
    committed: int
    rejected: int
    verification_failures: int
    metrics: MetricsSummary | None
    snapshot_id: str
    audit_head: str
    paused: bool = False

    def to_dict(self) -> dict:
        return {
            "episodes_run": self.episodes_run,
            "evolution_steps": self.evolution_steps,
            "proposals": self.proposals,
            "committed": self.committed,
            "rejected": self.rejected,
            "verification_failures": self.verification_failures,
            "metrics": self.metrics.to_dict() if self.metrics else None,
            "snapshot_id": self.snapshot_id,
            "audit_head": self.audit_head,
            "paused": self.paused,
        }

    def render(self) -> str:
        cols = ("Proposals", "Committed", "Verification Failures")
        vals = (str(self.proposals), str(self.committed), str(self.verification_failures))
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        lines = [
            f"episodes run:     {self.episodes_run}",
            f"evolution steps:  {self.evolution_steps}",
        ]
        if self.metrics:
            lines.append(f"TGC / APT:        {self.metrics.TGC:.4f} / {self.metrics.APT:.4f}")
        lines += [
            f"snapshot:         {self.snapshot_id}",
            f"audit head:       {self.audit_head}",
            "",
            " | ".join(c.ljust(w) for c, w in zip(cols, widths)),
            "-+-".join("-" * w for w in widths),
            " | ".join(v.rjust(w) for v, w in zip(vals, widths)),
        ]
        if self.paused:
            lines.append("\npaused: a review ticket is pending (see `review list`)")
        return "\n".join(lines)


def audit_counts(audit, since: int = 0) -> dict:
    recs = list(audit)[since:]
    return {
        "proposals": sum(1 for r in recs if r.record_kind == "proposal"),
        "committed": sum(1 for r in recs if r.record_kind == "commit"),
        "rejected": sum(1 for r in recs if r.record_kind == "rejection"),
        "verification_failures": sum(
            1 for r in recs if r.record_kind == "rejection" and r.payload.get("reason") == "verification_failed"
        ),
    }


def run_loop(config: RunConfig, sandbox: Sandbox | None = None) -> RunReport:
    if not config.workspace:
        raise ConfigError("config names no workspace")
    ws = Workspace.open(config.workspace, sandbox)
    source = config.task_source()
    backend = config.backend() if config.kind == "agentic" else None
    with ws.lock():
        start = len(ws.audit)
        result = run_episodes(ws, source, config.episode_count, config.settings(), backend)
        counts = audit_counts(ws.audit, start)
        return RunReport(
            episodes_run=len(result.scores),
            evolution_steps=len(result.outcomes),
            metrics=compute_metrics(result.scores) if result.scores else None,
            snapshot_id=ws.registry.take_snapshot(len(ws.evidence)).snapshot_id,
            audit_head=ws.audit.head_digest,
            paused=result.paused,
            **counts,
        )
