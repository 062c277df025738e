"""Metrics, baselines and the evolution-scaling experiment over the drift environment."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .canonical import canonical_bytes
from .drift import (  # noqa: F401  (re-exported for callers of the harness)
    SUITES,
    DriftEnvironment,
    FieldDescriptor,
    GeneratedTask,
    Mutation,
    advance_drift,
    canonical_drift_suite,
    generate_episode,
    nest,
    oracle_p95,
    rename,
    seed_state,
    three_drift_suite,
    type_change,
)
from .errors import EmptyScores, ScoreOutOfRange
from .evolver import EvolveBudget, EvolverBackend, ScriptedEvolver
from .loop import KINDS, LoopResult, LoopSettings, evaluate, run_episodes
from .sandbox import Sandbox
from .solve import PolicyHandle, SolveBudget
from .workspace import Workspace

HELD_OUT_SIZE = 50
HELD_OUT_BASE = 1_000_000
# the scripted evolver's synthesis for these drifts needs 1 and 2 repairs respectively
THREE_DRIFT_FLAWS = {"endpoint nested": 1, "status renamed": 2}
FRONTIER_COLUMNS = ("budget_label", "budget_value", "steps_used", "TGC", "APT")


@dataclass(frozen=True)
class MetricsSummary:
    TGC: float
    APT: float
    per_episode_scores: tuple[float, ...]
    n: int

    def to_dict(self) -> dict:
        return {"TGC": self.TGC, "APT": self.APT, "per_episode_scores": list(self.per_episode_scores), "n": self.n}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsSummary":
        return cls(d["TGC"], d["APT"], tuple(d["per_episode_scores"]), d["n"])


def compute_metrics(scores) -> MetricsSummary:
    scores = tuple(float(s) for s in scores)
    if not scores:
        raise EmptyScores("no scores")
    for s in scores:
        if not 0.0 <= s <= 1.0:
            raise ScoreOutOfRange(f"score {s} outside [0, 1]")
    n = len(scores)
    return MetricsSummary(sum(1 for s in scores if s == 1.0) / n, math.fsum(scores) / n, scores, n)


@dataclass(frozen=True)
class FrontierPoint:
    budget_label: str
    budget_value: int
    TGC: float
    APT: float
    steps_used: int

    def row(self) -> list[str]:
        return [self.budget_label, str(self.budget_value), str(self.steps_used), f"{self.TGC:.6f}", f"{self.APT:.6f}"]


def frontier_csv(points: list[FrontierPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRONTIER_COLUMNS)
    for p in points:
        w.writerow(p.row())
    return buf.getvalue()


def write_frontier_csv(points: list[FrontierPoint], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(frontier_csv(points), encoding="utf-8")
    return path


def write_summary(summary: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(canonical_bytes(summary) + b"\n")
    return path


def task_source(env: DriftEnvironment, seed: int | None = None):
    return lambda t: generate_episode(env, t, seed)


def held_out_tasks(env: DriftEnvironment, seed: int | None = None, n: int = HELD_OUT_SIZE) -> list[GeneratedTask]:
    """Fixed evaluation set drawn from the final post-drift distribution."""
    return [generate_episode(env, HELD_OUT_BASE + i, seed) for i in range(n)]


@dataclass
class SuiteRun:
    kind: str
    result: LoopResult
    summary: MetricsSummary
    workspace: Workspace = field(repr=False)


def run_suite(kind: str, env: DriftEnvironment, episodes: int, seed: int = 0, *, evolver: EvolverBackend | None = None,
              solver: PolicyHandle | None = None, solve_budget: SolveBudget | None = None,
              evolve_budget: EvolveBudget | None = None, batch_size: int = 10, sandbox: Sandbox | None = None,
              gate_mode: str = "auto") -> SuiteRun:
    if episodes < 1:
        raise ValueError("need at least one episode")
    if kind not in KINDS:
        raise ValueError(f"unknown baseline {kind!r}")
    ws = Workspace.in_memory(sandbox=sandbox)
    settings = LoopSettings(kind=kind, solver=solver or PolicyHandle(seed=seed), solve_budget=solve_budget or SolveBudget(),
                            evolve_budget=evolve_budget or EvolveBudget(), batch_size=batch_size, gate_mode=gate_mode)
    backend = evolver or ScriptedEvolver() if kind == "agentic" else None
    result = run_episodes(ws, task_source(env, seed), episodes, settings, backend)
    return SuiteRun(kind, result, compute_metrics(result.scores), ws)


def run_baseline(kind: str, env: DriftEnvironment, episodes: int, seed: int = 0, **kwargs) -> MetricsSummary:
    return run_suite(kind, env, episodes, seed, **kwargs).summary


@dataclass(frozen=True)
class ScalingConfig:
    step_counts: tuple[int, ...] = (1, 2, 3)
    budgets: tuple[int, ...] = (0, 1, 3)
    batch: int = 10
    suite: str = "three_drift"
    seed: int = 0
    flaws: dict = field(default_factory=lambda: dict(THREE_DRIFT_FLAWS))
    held_out: int = HELD_OUT_SIZE
    budget_label: str = "max_repair_attempts"

    def __post_init__(self):
        object.__setattr__(self, "step_counts", tuple(sorted(set(int(k) for k in self.step_counts))))
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))
        if not self.step_counts:
            raise ValueError("step_counts must be non-empty")
        if any(k < 0 or k > 12 for k in self.step_counts):
            raise ValueError("step counts must lie in 0..12")
        if self.suite not in SUITES:
            raise ValueError(f"unknown suite {self.suite!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scaling config keys: {', '.join(sorted(extra))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) if not isinstance(getattr(self, k), tuple) else list(getattr(self, k))
                for k in self.__dataclass_fields__}


def run_scaling_experiment(config: ScalingConfig, sandbox: Sandbox | None = None) -> list[FrontierPoint]:
    """One run per budget over the largest k; after the k-th step the held-out set is scored.

    A run with k steps is a prefix of the run with max(k) steps (everything is
    deterministic), so scoring checkpoints of one run equals separate runs.
    """
    env = SUITES[config.suite](config.seed)
    sandbox = sandbox or Sandbox()
    tasks = held_out_tasks(env, config.seed, config.held_out)
    source = task_source(env, config.seed)
    points = []
    for b in config.budgets:
        ws = Workspace.in_memory(sandbox=sandbox)
        settings = LoopSettings(kind="agentic", solver=PolicyHandle(seed=config.seed),
                                evolve_budget=EvolveBudget(max_repair_attempts=b), batch_size=config.batch)
        backend = ScriptedEvolver(flaws=config.flaws)
        steps = 0
        for k in range(0, max(config.step_counts) + 1):
            if k > 0:
                r = run_episodes(ws, source, config.batch, settings, backend)
                steps += len(r.outcomes)
            if k in config.step_counts:
                m = compute_metrics(evaluate(ws, tasks, settings))
                points.append(FrontierPoint(config.budget_label, b, m.TGC, m.APT, steps))
    return points


def drifted_scores(run: SuiteRun, env: DriftEnvironment, after_episode: int = -1) -> list[float]:
    start = env.drift_start()
    if start is None:
        return []
    lo = max(start, after_episode + 1)
    return [s for t, s in zip(run.result.episodes, run.result.scores) if t >= lo]


def first_commit_episode(run: SuiteRun) -> int | None:
    for o in run.result.outcomes:
        if o.c:
            return o.snapshot_after.episode_index
    return None


def scaling_summary(config: ScalingConfig, points: list[FrontierPoint], episodes: int = 30) -> dict:
    env = SUITES[config.suite](config.seed)
    baselines = {}
    for kind in KINDS:
        evolver = ScriptedEvolver(flaws=config.flaws) if kind == "agentic" else None
        baselines[kind] = run_baseline(kind, env, episodes, config.seed, evolver=evolver).to_dict()
    return {
        "config": config.to_dict(),
        "baselines": baselines,
        "held_out": {"size": config.held_out, "distribution": "final post-drift schema (all scheduled drifts applied)"},
        "frontier": [dict(zip(FRONTIER_COLUMNS, p.row())) for p in points],
    }
