"""Typed payloads stored in the knowledge, tool and validation registries."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Union

from .canonical import canonical_bytes, digest_bytes
from .errors import InvalidPayload

IDENTIFIER_RE = re.compile(r"^[a-z][a-z0-9]*(?:_[a-z0-9]+)*$")
MAX_NAME_LENGTH = 128

TYPE_TAGS = ("string", "int", "float", "bool", "object", "array")
DOC_TYPES = ("fact", "schema", "workflow", "skill", "exemplar")
CHECK_KINDS = ("syntax", "schema", "runtime", "regression")
EXPECTATION_KINDS = ("success_flag_true", "exact_match", "contains")
SKILL_FRONTMATTER_KEYS = ("name", "type", "triggers", "version")


class ArtifactKind(str, Enum):
    KNOWLEDGE = "knowledge"
    TOOL = "tool"
    VALIDATION = "validation"

    def __str__(self) -> str:
        return self.value


def is_identifier(name: str) -> bool:
    return (
        isinstance(name, str)
        and 0 < len(name) <= MAX_NAME_LENGTH
        and IDENTIFIER_RE.match(name) is not None
    )


@dataclass(frozen=True)
class ArtifactId:
    kind: ArtifactKind
    name: str

    def __post_init__(self):
        object.__setattr__(self, "kind", ArtifactKind(self.kind))
        if not is_identifier(self.name):
            raise InvalidPayload(f"invalid artifact name {self.name!r}")

    def __str__(self) -> str:
        return f"{self.kind.value}/{self.name}"

    def __lt__(self, other: "ArtifactId") -> bool:
        return str(self) < str(other)

    @classmethod
    def parse(cls, text: str) -> "ArtifactId":
        kind, sep, name = str(text).partition("/")
        if not sep:
            raise InvalidPayload(f"artifact id must look like kind/name, got {text!r}")
        try:
            return cls(ArtifactKind(kind), name)
        except ValueError as exc:
            raise InvalidPayload(str(exc)) from None


@dataclass(frozen=True)
class ExecutionLimits:
    wall_time_ms: int = 2000
    max_stdout_bytes: int = 65536
    env_allowlist: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "env_allowlist", tuple(self.env_allowlist))
        if self.wall_time_ms <= 0 or self.max_stdout_bytes <= 0:
            raise InvalidPayload("execution limits must be strictly positive")

    def to_dict(self) -> dict:
        return {
            "wall_time_ms": self.wall_time_ms,
            "max_stdout_bytes": self.max_stdout_bytes,
            "env_allowlist": list(self.env_allowlist),
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExecutionLimits":
        if d is None:
            return cls()
        return cls(
            wall_time_ms=int(d.get("wall_time_ms", 2000)),
            max_stdout_bytes=int(d.get("max_stdout_bytes", 65536)),
            env_allowlist=tuple(d.get("env_allowlist", ())),
        )


@dataclass(frozen=True)
class Parameter:
    name: str
    type_tag: str
    required: bool = True


@dataclass(frozen=True)
class ToolSpec:
    description: str
    parameters: tuple[Parameter, ...]
    entrypoint: str
    attached_checks: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "parameters", tuple(self.parameters))
        object.__setattr__(self, "attached_checks", tuple(self.attached_checks))

    def validate(self) -> None:
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise InvalidPayload("parameter names must be unique")
        for p in self.parameters:
            if not is_identifier(p.name):
                raise InvalidPayload(f"invalid parameter name {p.name!r}")
            if p.type_tag not in TYPE_TAGS:
                raise InvalidPayload(f"unknown type tag {p.type_tag!r}")
        if not isinstance(self.entrypoint, str) or not self.entrypoint.strip():
            raise InvalidPayload("entrypoint must be non-empty")
        for ref in self.attached_checks:
            if not is_identifier(ref):
                raise InvalidPayload(f"invalid attached check id {ref!r}")

    def to_dict(self) -> dict:
        return {
            "description": self.description,
            "parameters": [
                {"name": p.name, "type_tag": p.type_tag, "required": p.required}
                for p in self.parameters
            ],
            "entrypoint": self.entrypoint,
            "attached_checks": list(self.attached_checks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToolSpec":
        return cls(
            description=d["description"],
            parameters=tuple(
                Parameter(p["name"], p["type_tag"], bool(p.get("required", True)))
                for p in d.get("parameters", ())
            ),
            entrypoint=d["entrypoint"],
            attached_checks=tuple(d.get("attached_checks", ())),
        )


@dataclass(frozen=True)
class KnowledgeDoc:
    doc_type: str
    title: str
    body: Any
    triggers: tuple[str, ...] = ()
    frontmatter: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "triggers", tuple(self.triggers))

    def validate(self) -> None:
        if self.doc_type not in DOC_TYPES:
            raise InvalidPayload(f"unknown doc_type {self.doc_type!r}")
        for t in self.triggers:
            if not isinstance(t, str) or not t or t != t.lower():
                raise InvalidPayload(f"trigger {t!r} must be a non-empty lowercase keyword")
        if self.doc_type in ("skill", "workflow") and not self.triggers:
            raise InvalidPayload(f"{self.doc_type} documents need at least one trigger")
        if self.doc_type == "skill":
            missing = [k for k in SKILL_FRONTMATTER_KEYS if k not in self.frontmatter]
            if missing:
                raise InvalidPayload(f"skill frontmatter missing keys: {', '.join(missing)}")

    def to_dict(self) -> dict:
        return {
            "doc_type": self.doc_type,
            "title": self.title,
            "body": self.body,
            "triggers": list(self.triggers),
            "frontmatter": dict(self.frontmatter),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnowledgeDoc":
        return cls(
            doc_type=d["doc_type"],
            title=d["title"],
            body=d["body"],
            triggers=tuple(d.get("triggers", ())),
            frontmatter=dict(d.get("frontmatter", {})),
        )


@dataclass(frozen=True)
class ValidationCase:
    check_kind: str
    targets: tuple[ArtifactId, ...]
    expectation: dict
    fixture_input: dict | None = None
    limits: ExecutionLimits = ExecutionLimits()

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))

    def validate(self) -> None:
        if self.check_kind not in CHECK_KINDS:
            raise InvalidPayload(f"unknown check_kind {self.check_kind!r}")
        if not self.targets:
            raise InvalidPayload("validation case needs at least one target")
        kind = self.expectation.get("kind") if isinstance(self.expectation, dict) else None
        if kind not in EXPECTATION_KINDS:
            raise InvalidPayload(f"unknown expectation {self.expectation!r}")
        if kind in ("exact_match", "contains") and "value" not in self.expectation:
            raise InvalidPayload(f"{kind} expectation needs a value")
        if kind == "contains" and not isinstance(self.expectation["value"], str):
            raise InvalidPayload("contains expectation needs a string value")
        if self.check_kind in ("runtime", "regression") and not isinstance(self.fixture_input, dict):
            raise InvalidPayload(f"{self.check_kind} cases need a fixture_input document")
        if self.check_kind == "regression" and kind == "success_flag_true":
            raise InvalidPayload("regression cases need a non-trivial expectation")

    def to_dict(self) -> dict:
        return {
            "check_kind": self.check_kind,
            "targets": [str(t) for t in self.targets],
            "expectation": dict(self.expectation),
            "fixture_input": self.fixture_input,
            "limits": self.limits.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValidationCase":
        return cls(
            check_kind=d["check_kind"],
            targets=tuple(ArtifactId.parse(t) for t in d["targets"]),
            expectation=dict(d["expectation"]),
            fixture_input=d.get("fixture_input"),
            limits=ExecutionLimits.from_dict(d.get("limits")),
        )


Payload = Union[ToolSpec, KnowledgeDoc, ValidationCase]

PAYLOAD_TYPES = {
    ArtifactKind.TOOL: ToolSpec,
    ArtifactKind.KNOWLEDGE: KnowledgeDoc,
    ArtifactKind.VALIDATION: ValidationCase,
}


def check_payload(kind: ArtifactKind, payload: Payload) -> None:
    """Raise InvalidPayload unless `payload` is a well-formed payload for `kind`."""
    expected = PAYLOAD_TYPES[ArtifactKind(kind)]
    if not isinstance(payload, expected):
        raise InvalidPayload(f"{kind} artifacts take {expected.__name__}, got {type(payload).__name__}")
    try:
        payload.validate()
        canonical_bytes(payload.to_dict())
    except InvalidPayload:
        raise
    except (TypeError, ValueError, KeyError, AttributeError) as exc:
        raise InvalidPayload(f"payload not serializable: {exc}") from None


def payload_bytes(payload: Payload) -> bytes:
    return canonical_bytes(payload.to_dict())


def payload_digest(payload: Payload) -> str:
    return digest_bytes(payload_bytes(payload))


def payload_from_dict(kind: ArtifactKind, d: dict) -> Payload:
    try:
        return PAYLOAD_TYPES[ArtifactKind(kind)].from_dict(d)
    except (KeyError, TypeError) as exc:
        raise InvalidPayload(f"cannot decode {kind} payload: {exc}") from None


# Skill files: a leading frontmatter block between two `---` lines, then the body.

def skill_to_markdown(doc: KnowledgeDoc) -> str:
    fm = dict(doc.frontmatter)
    lines = ["---"]
    for key in SKILL_FRONTMATTER_KEYS:
        value = fm.pop(key, "")
        if key == "triggers" and isinstance(value, (list, tuple)):
            value = ", ".join(value)
        lines.append(f"{key}: {value}")
    for key in sorted(fm):
        lines.append(f"{key}: {fm[key]}")
    lines.append("---")
    body = doc.body if isinstance(doc.body, str) else str(doc.body)
    return "\n".join(lines) + "\n" + body


def parse_skill_markdown(text: str) -> tuple[dict, str]:
    """Split a skill file into (frontmatter, body); triggers come back as a list."""
    lines = text.split("\n")
    if not lines or lines[0].strip() != "---":
        raise InvalidPayload("skill file must start with a --- line")
    try:
        end = next(i for i in range(1, len(lines)) if lines[i].strip() == "---")
    except StopIteration:
        raise InvalidPayload("unterminated frontmatter block") from None
    fm: dict[str, Any] = {}
    for line in lines[1:end]:
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise InvalidPayload(f"bad frontmatter line {line!r}")
        fm[key.strip()] = value.strip()
    if "triggers" in fm:
        fm["triggers"] = [t.strip() for t in fm["triggers"].split(",") if t.strip()]
    missing = [k for k in SKILL_FRONTMATTER_KEYS if k not in fm]
    if missing:
        raise InvalidPayload(f"skill frontmatter missing keys: {', '.join(missing)}")
    return fm, "\n".join(lines[end + 1 :])


def make_skill(name: str, title: str, body: str, triggers, version: int = 1) -> KnowledgeDoc:
    triggers = tuple(triggers)
    return KnowledgeDoc(
        doc_type="skill",
        title=title,
        body=body,
        triggers=triggers,
        frontmatter={"name": name, "type": "skill", "triggers": ", ".join(triggers), "version": str(version)},
    )
