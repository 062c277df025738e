"""Diagnoses, edit plans and candidate updates exchanged between the evolver and the gate."""

from __future__ import annotations

from dataclasses import dataclass, field

from .artifacts import (
    ArtifactId,
    ArtifactKind,
    Payload,
    ValidationCase,
    payload_from_dict,
)
from .canonical import digest
from .evidence import FailureSignature

OPERATORS = ("add", "patch", "refactor", "prune")

# Planner action schema labels -> (operator, kind[, doc_type])
ACTION_LABELS = {
    "CreateTool": ("add", ArtifactKind.TOOL),
    "EvolveTool": ("patch", ArtifactKind.TOOL),
    "AddKnowledge": ("add", ArtifactKind.KNOWLEDGE),
    "EvolveKnowledge": ("patch", ArtifactKind.KNOWLEDGE),
    "AddSkill": ("add", ArtifactKind.KNOWLEDGE),
    "AddTest": ("add", ArtifactKind.VALIDATION),
    "Prune": ("prune", None),
    "Refactor": ("refactor", None),
}


@dataclass(frozen=True)
class Diagnosis:
    id: str
    objective: str
    signatures: tuple[FailureSignature, ...]
    implicated: tuple[ArtifactId, ...]
    confidence: float
    window_ref: tuple[int, int]
    details: dict = field(default_factory=dict)

    def is_noop(self) -> bool:
        return not self.objective

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "objective": self.objective,
            "signatures": [s.to_dict() for s in self.signatures],
            "implicated": [str(a) for a in self.implicated],
            "confidence": self.confidence,
            "window_ref": list(self.window_ref),
            "details": self.details,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Diagnosis":
        return cls(
            id=d["id"],
            objective=d["objective"],
            signatures=tuple(FailureSignature.from_dict(s) for s in d.get("signatures", ())),
            implicated=tuple(ArtifactId.parse(a) for a in d.get("implicated", ())),
            confidence=float(d["confidence"]),
            window_ref=tuple(d["window_ref"]),
            details=dict(d.get("details", {})),
        )


def diagnosis_id(objective: str, signatures, window_ref) -> str:
    return "diag_" + digest([objective, [s.to_dict() for s in signatures], list(window_ref)])[:16]


@dataclass(frozen=True)
class EditAction:
    operator: str
    target_kind: ArtifactKind
    target: str
    spec: dict = field(default_factory=dict)
    depends_on: tuple[int, ...] = ()
    rationale: str = ""

    def __post_init__(self):
        object.__setattr__(self, "target_kind", ArtifactKind(self.target_kind))
        object.__setattr__(self, "depends_on", tuple(self.depends_on))

    @property
    def target_id(self) -> ArtifactId:
        return ArtifactId(self.target_kind, self.target)

    def to_dict(self) -> dict:
        return {
            "operator": self.operator,
            "target_kind": self.target_kind.value,
            "target": self.target,
            "spec": self.spec,
            "depends_on": list(self.depends_on),
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EditAction":
        return cls(d["operator"], ArtifactKind(d["target_kind"]), d["target"], dict(d.get("spec", {})),
                   tuple(d.get("depends_on", ())), d.get("rationale", ""))


@dataclass(frozen=True)
class EditPlan:
    diagnosis_ref: str
    actions: tuple[EditAction, ...]
    ordering_note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))

    def to_dict(self) -> dict:
        return {
            "diagnosis_ref": self.diagnosis_ref,
            "actions": [a.to_dict() for a in self.actions],
            "ordering_note": self.ordering_note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EditPlan":
        return cls(d["diagnosis_ref"], tuple(EditAction.from_dict(a) for a in d["actions"]), d.get("ordering_note", ""))

    def digest(self) -> str:
        return digest(self.to_dict())


@dataclass(frozen=True)
class Write:
    action_index: int
    operator: str
    target: ArtifactId
    payload: Payload | None = None
    base_version: int | None = None

    def to_dict(self) -> dict:
        return {
            "action_index": self.action_index,
            "operator": self.operator,
            "target": str(self.target),
            "payload": None if self.payload is None else self.payload.to_dict(),
            "base_version": self.base_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Write":
        target = ArtifactId.parse(d["target"])
        payload = None if d.get("payload") is None else payload_from_dict(target.kind, d["payload"])
        return cls(int(d["action_index"]), d["operator"], target, payload, d.get("base_version"))


@dataclass(frozen=True)
class AttachedCheck:
    name: str
    case: ValidationCase

    @property
    def id(self) -> ArtifactId:
        return ArtifactId(ArtifactKind.VALIDATION, self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "case": self.case.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "AttachedCheck":
        return cls(d["name"], ValidationCase.from_dict(d["case"]))


@dataclass(frozen=True)
class CandidateUpdate:
    plan_ref: str
    writes: tuple[Write, ...]
    attached_checks: tuple[AttachedCheck, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "writes", tuple(self.writes))
        object.__setattr__(self, "attached_checks", tuple(self.attached_checks))

    def written_ids(self) -> list[ArtifactId]:
        return [w.target for w in self.writes]

    def to_dict(self) -> dict:
        return {
            "plan_ref": self.plan_ref,
            "writes": [w.to_dict() for w in self.writes],
            "attached_checks": [c.to_dict() for c in self.attached_checks],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateUpdate":
        return cls(
            d["plan_ref"],
            tuple(Write.from_dict(w) for w in d["writes"]),
            tuple(AttachedCheck.from_dict(c) for c in d.get("attached_checks", ())),
            dict(d.get("provenance", {})),
        )

    def digest(self) -> str:
        return digest(self.to_dict())
