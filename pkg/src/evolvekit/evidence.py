"""Append-only trajectory log, evidence windows and failure-signature mining."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

from .artifacts import ArtifactId
from .canonical import canonical_bytes, canonical_text, loads
from .errors import (
    EmptyPatternSet,
    EmptyWindow,
    EndOutOfRange,
    NonMonotonicEpisode,
    PassedExceedsTotal,
    ZeroTotal,
)

STEP_KINDS = ("model_output", "tool_call", "tool_result", "env_feedback", "error")
ACTING_KINDS = ("model_output", "tool_call")
DEFAULT_WINDOW = 10
MAX_SAMPLE_EPISODES = 5


@dataclass(frozen=True)
class TaskInput:
    episode: int
    description: str
    attachments: dict = field(default_factory=dict)
    check_count: int = 1

    def __post_init__(self):
        if self.check_count < 1:
            raise ValueError("check_count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "episode": self.episode,
            "description": self.description,
            "attachments": self.attachments,
            "check_count": self.check_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskInput":
        return cls(int(d["episode"]), d["description"], d.get("attachments", {}), int(d.get("check_count", 1)))


@dataclass(frozen=True)
class TrajectoryStep:
    index: int
    kind: str
    payload: Any
    is_failure: bool = False

    def to_dict(self) -> dict:
        return {"index": self.index, "kind": self.kind, "payload": self.payload, "is_failure": self.is_failure}

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryStep":
        return cls(int(d["index"]), d["kind"], d["payload"], bool(d["is_failure"]))

    def text(self) -> str:
        p = self.payload
        return p if isinstance(p, str) else canonical_text(p)


@dataclass(frozen=True)
class Usage:
    steps: int = 0
    tool_calls: int = 0
    tokens: int = 0

    def to_dict(self) -> dict:
        return {"steps": self.steps, "tool_calls": self.tool_calls, "tokens": self.tokens}


@dataclass(frozen=True)
class Trajectory:
    episode: int
    task: TaskInput
    steps: tuple[TrajectoryStep, ...]
    score: float = 0.0
    success: bool = False
    usage: Usage = Usage()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    def with_score(self, score: float) -> "Trajectory":
        return replace(self, score=score, success=score == 1.0)

    def answer(self):
        """The submitted answer, if the episode ended with a `complete` action."""
        for step in reversed(self.steps):
            if step.kind == "model_output" and isinstance(step.payload, dict) and "complete" in step.payload:
                return step.payload["complete"]
        return None

    def to_dict(self) -> dict:
        return {
            "episode": self.episode,
            "task": self.task.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
            "score": self.score,
            "success": self.success,
            "usage": self.usage.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            int(d["episode"]),
            TaskInput.from_dict(d["task"]),
            tuple(TrajectoryStep.from_dict(s) for s in d["steps"]),
            d["score"],
            bool(d["success"]),
            Usage(**d["usage"]),
        )

    def to_bytes(self) -> bytes:
        return canonical_bytes(self.to_dict())


@dataclass(frozen=True)
class FailureSignature:
    pattern: str
    match_count: int
    window_size: int
    sample_episodes: tuple[int, ...] = ()
    implicated_artifacts: tuple[ArtifactId, ...] = ()

    def to_dict(self) -> dict:
        return {
            "pattern": self.pattern,
            "match_count": self.match_count,
            "window_size": self.window_size,
            "sample_episodes": list(self.sample_episodes),
            "implicated_artifacts": [str(a) for a in self.implicated_artifacts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FailureSignature":
        return cls(
            d["pattern"],
            int(d["match_count"]),
            int(d["window_size"]),
            tuple(d.get("sample_episodes", ())),
            tuple(ArtifactId.parse(a) for a in d.get("implicated_artifacts", ())),
        )


class EvidenceLog:
    """Obs[1:t]. One producer appends; readers see the committed prefix."""

    def __init__(self, root: str | Path | None = None):
        self.path = Path(root) / "evidence" / "trajectories.jsonl" if root is not None else None
        self._lines: list[bytes] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._lines = [ln for ln in self.path.read_bytes().split(b"\n") if ln]

    def __len__(self) -> int:
        return len(self._lines)

    def record_trajectory(self, traj: Trajectory) -> int:
        with self._lock:
            if traj.episode != len(self._lines):
                raise NonMonotonicEpisode(f"expected episode {len(self._lines)}, got {traj.episode}")
            line = traj.to_bytes()
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "ab") as fh:
                    fh.write(line + b"\n")
            self._lines.append(line)
            return traj.episode

    def raw(self, episode: int) -> bytes:
        return self._lines[episode]

    def __getitem__(self, episode: int) -> Trajectory:
        return Trajectory.from_dict(loads(self._lines[episode]))

    def all(self) -> list[Trajectory]:
        return [Trajectory.from_dict(loads(ln)) for ln in list(self._lines)]

    def evidence_window(self, end: int, W: int = DEFAULT_WINDOW) -> list[Trajectory]:
        if W < 1:
            raise ValueError("window size must be positive")
        n = len(self._lines)
        if not 0 <= end < n:
            raise EndOutOfRange(f"end {end} outside log of length {n}")
        return [self[i] for i in range(max(0, end - W + 1), end + 1)]


def evidence_window(log: EvidenceLog, end: int, W: int = DEFAULT_WINDOW) -> list[Trajectory]:
    return log.evidence_window(end, W)


def _string_leaves(obj) -> Iterable[str]:
    if isinstance(obj, str):
        yield obj
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _string_leaves(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _string_leaves(v)


def trajectory_text(traj: Trajectory) -> Iterable[str]:
    """Searchable text of every step: the serialized payload plus its raw string leaves."""
    for step in traj.steps:
        yield step.text()
        if not isinstance(step.payload, str):
            yield from _string_leaves(step.payload)


def mine_signatures(window: list[Trajectory], patterns: list[str]) -> list[FailureSignature]:
    """Count, per literal pattern, how many trajectories mention it in any step."""
    if not window:
        raise EmptyWindow("cannot mine an empty window")
    if not patterns:
        raise EmptyPatternSet("no patterns to mine")
    texts = [(t.episode, list(trajectory_text(t))) for t in window]
    sigs = []
    for pattern in dict.fromkeys(patterns):
        hits = [ep for ep, chunks in texts if any(pattern in c for c in chunks)]
        sigs.append(FailureSignature(pattern, len(hits), len(window), tuple(hits[:MAX_SAMPLE_EPISODES])))
    sigs.sort(key=lambda s: (-s.match_count, s.pattern))
    return sigs


def task_score(passed: int, total: int) -> float:
    if total < 1:
        raise ZeroTotal("total must be at least 1")
    if passed < 0 or passed > total:
        raise PassedExceedsTotal(f"passed={passed} outside [0, {total}]")
    return passed / total
