"""The solve/evolve loop shared by the run command and the experiment drivers."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from .artifacts import ArtifactKind, KnowledgeDoc
from .drift import GeneratedTask
from .evidence import DEFAULT_WINDOW, Trajectory
from .evolver import EvolveBudget, EvolverBackend, StepOutcome, run_evolution_step
from .solve import PolicyHandle, SolveBudget, run_solve, tokens_of

KINDS = ("no_evolution", "append_memory", "agentic")
MEMORY_TEXT_LIMIT = 4000

TaskSource = Callable[[int], GeneratedTask]


@dataclass(frozen=True)
class LoopSettings:
    kind: str = "agentic"
    solver: PolicyHandle = PolicyHandle()
    solve_budget: SolveBudget = SolveBudget()
    evolve_budget: EvolveBudget = EvolveBudget()
    gate_mode: str = "auto"
    batch_size: int = 10
    window: int = DEFAULT_WINDOW
    interactive: bool = False
    context_limit: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loop kind {self.kind!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LoopResult:
    scores: list[float] = field(default_factory=list)
    episodes: list[int] = field(default_factory=list)
    outcomes: list[StepOutcome] = field(default_factory=list)
    paused: bool = False

    def committed(self) -> int:
        return sum(o.c for o in self.outcomes)


def solve_task(ws, task: GeneratedTask, settings: LoopSettings, snapshot=None) -> Trajectory:
    snapshot = snapshot or ws.registry.take_snapshot(task.task.episode)
    traj = run_solve(settings.solver, ws.registry, snapshot, task.task, settings.solve_budget, ws.sandbox,
                     settings.context_limit)
    return traj.with_score(task.score(traj.answer()))


def _remember(ws, traj: Trajectory) -> None:
    """Append-and-retrieve: raw failed-trajectory text, ungated."""
    text = "\n".join(s.text() for s in traj.steps)[:MEMORY_TEXT_LIMIT]
    triggers = tuple(sorted(tokens_of(traj.task.description)))
    doc = KnowledgeDoc("exemplar", f"Failed episode {traj.episode}", text, triggers)
    ws.registry.put_artifact(ArtifactKind.KNOWLEDGE, f"memory_{traj.episode}", doc, None, traj.episode)


def run_episodes(ws, source: TaskSource, n: int, settings: LoopSettings, backend: EvolverBackend | None = None,
                 on_outcome: Callable[[StepOutcome], None] | None = None) -> LoopResult:
    """Run `n` more episodes; agentic runs evolve once after every full batch."""
    result = LoopResult()
    for _ in range(n):
        t = len(ws.evidence)
        traj = solve_task(ws, source(t), settings)
        ws.evidence.record_trajectory(traj)
        result.scores.append(traj.score)
        result.episodes.append(t)
        if settings.kind == "append_memory" and not traj.success:
            _remember(ws, traj)
        if settings.kind == "agentic" and (t + 1) % settings.batch_size == 0:
            if backend is None:
                raise ValueError("agentic runs need an evolver backend")
            out = run_evolution_step(ws, t, settings.evolve_budget, backend, settings.gate_mode,
                                     settings.window, settings.interactive, t)
            result.outcomes.append(out)
            if on_outcome is not None:
                on_outcome(out)
            if out.status == "pending_review":
                result.paused = True
                break
    return result


def evaluate(ws, tasks: list[GeneratedTask], settings: LoopSettings, workers: int = 4) -> list[float]:
    """Score tasks against the current snapshot without recording evidence."""
    snapshot = ws.registry.take_snapshot(len(ws.evidence))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        trajs = list(pool.map(lambda task: solve_task(ws, task, settings, snapshot), tasks))
    return [t.score for t in trajs]
