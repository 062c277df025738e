"""Synthetic service-log environment whose record schema drifts on a schedule.

Tasks ask for per-endpoint metrics (p95 latency, status counts, mean latency)
over a batch of log records. Scheduled mutations rename, nest or retype fields,
which breaks any parser that hard-codes the original layout.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from typing import Any

from .artifacts import ArtifactKind, KnowledgeDoc
from .canonical import canonical_text
from .errors import EmptyInput, InvalidSchedule
from .evidence import TaskInput, task_score

CANONICAL_FIELDS = ("endpoint", "latency_ms", "status")
FIELD_TYPES = {"endpoint": "string", "latency_ms": "float", "status": "int"}
VALUE_TYPES = ("string", "int", "float")
DEFAULT_ENDPOINTS = ("/api/login", "/api/orders", "/api/search", "/api/users")
STATUS_CODES = (200, 200, 200, 201, 404, 500, 503)
MUTATIONS = ("rename", "nest", "type_change")
# renderings that round-trip back to the canonical value
_LOSSLESS = {"string": ("string",), "float": ("float", "string"), "int": ("int", "float", "string")}
NORMALIZER_TOOL = "normalize_log_records"
SCHEMA_DOC = "log_schema"

TEMPLATES = ("p95", "count_by_status", "mean")
TEMPLATE_FIELDS = {
    "p95": ("endpoint", "latency_ms"),
    "count_by_status": ("endpoint", "status"),
    "mean": ("endpoint", "latency_ms"),
}
TEMPLATE_TEXT = {
    "p95": "Compute the p95 latency per endpoint from the attached service logs.",
    "count_by_status": "Count requests by status code per endpoint from the attached service logs.",
    "mean": "Compute the mean latency per endpoint from the attached service logs.",
}
FLOAT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class FieldDescriptor:
    name: str
    type: str
    parent: str | None = None
    canonical: str = ""

    def __post_init__(self):
        if not self.canonical:
            object.__setattr__(self, "canonical", self.name)

    @property
    def path(self) -> str:
        return f"{self.parent}.{self.name}" if self.parent else self.name


@dataclass(frozen=True)
class Mutation:
    kind: str
    field: str
    arg: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "field": self.field, "arg": self.arg}


def rename(field_name: str, new_name: str) -> Mutation:
    return Mutation("rename", field_name, new_name)


def nest(field_name: str, new_parent: str) -> Mutation:
    return Mutation("nest", field_name, new_parent)


def type_change(field_name: str, new_type: str) -> Mutation:
    return Mutation("type_change", field_name, new_type)


def default_schema() -> tuple[FieldDescriptor, ...]:
    return tuple(FieldDescriptor(f, FIELD_TYPES[f]) for f in CANONICAL_FIELDS)


def apply_mutation(schema: tuple[FieldDescriptor, ...], m: Mutation) -> tuple[FieldDescriptor, ...]:
    idx = [i for i, d in enumerate(schema) if d.name == m.field]
    if len(idx) != 1:
        raise InvalidSchedule(f"{m.kind} references field {m.field!r}, which does not exist at that point")
    i = idx[0]
    d = schema[i]
    if m.kind == "rename":
        if not m.arg or any(o.name == m.arg for o in schema):
            raise InvalidSchedule(f"cannot rename {m.field!r} to {m.arg!r}")
        new = replace(d, name=m.arg)
    elif m.kind == "nest":
        if not m.arg or any(o.name == m.arg for o in schema):
            raise InvalidSchedule(f"parent {m.arg!r} collides with a field name")
        new = replace(d, parent=m.arg)
    elif m.kind == "type_change":
        if m.arg not in VALUE_TYPES:
            raise InvalidSchedule(f"unknown type {m.arg!r}")
        if m.arg not in _LOSSLESS[FIELD_TYPES[d.canonical]]:
            raise InvalidSchedule(f"{d.canonical} values cannot be rendered as {m.arg}")
        new = replace(d, type=m.arg)
    else:
        raise InvalidSchedule(f"unknown mutation {m.kind!r}")
    return schema[:i] + (new,) + schema[i + 1:]


@dataclass(frozen=True)
class DriftEnvironment:
    schema: tuple[FieldDescriptor, ...] = field(default_factory=default_schema)
    drift_schedule: tuple[tuple[int, Mutation], ...] = ()
    records_per_task: int = 24
    seed: int = 0
    endpoints: tuple[str, ...] = DEFAULT_ENDPOINTS

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "drift_schedule", tuple((int(t), m) for t, m in self.drift_schedule))
        object.__setattr__(self, "endpoints", tuple(self.endpoints))
        if self.records_per_task < 1:
            raise InvalidSchedule("records_per_task must be positive")
        if not self.endpoints or self.records_per_task < len(self.endpoints):
            raise InvalidSchedule("need at least one record per endpoint")
        if sorted(d.canonical for d in self.schema) != sorted(CANONICAL_FIELDS):
            raise InvalidSchedule(f"schema must describe exactly {', '.join(CANONICAL_FIELDS)}")
        episodes = [t for t, _ in self.drift_schedule]
        if episodes != sorted(episodes) or any(t < 0 for t in episodes):
            raise InvalidSchedule("drift schedule must be sorted by non-negative episode")
        schema = self.schema
        for _, m in self.drift_schedule:
            schema = apply_mutation(schema, m)

    def schema_at(self, t: int) -> tuple[FieldDescriptor, ...]:
        schema = self.schema
        for when, m in self.drift_schedule:
            if when <= t:
                schema = apply_mutation(schema, m)
        return schema

    def drift_start(self) -> int | None:
        return self.drift_schedule[0][0] if self.drift_schedule else None

    def to_dict(self) -> dict:
        return {
            "schema": [[d.name, d.type, d.parent, d.canonical] for d in self.schema],
            "drift_schedule": [[t, m.to_dict()] for t, m in self.drift_schedule],
            "records_per_task": self.records_per_task,
            "seed": self.seed,
            "endpoints": list(self.endpoints),
        }


def advance_drift(env: DriftEnvironment, t: int) -> DriftEnvironment:
    """Fold every mutation scheduled at or before `t` into the base schema."""
    remaining = tuple((when, m) for when, m in env.drift_schedule if when > t)
    return replace(env, schema=env.schema_at(t), drift_schedule=remaining)


# --------------------------------------------------------------- value logic

def coerce(value: Any, type_tag: str, name: str = "value") -> Any:
    """Convert a rendered value back to its canonical type, or raise TypeError."""
    if isinstance(value, bool):
        raise TypeError(f"{name!r} has type bool")
    try:
        if type_tag == "string":
            return value if isinstance(value, str) else str(value)
        if type_tag == "float":
            if isinstance(value, (int, float)):
                return float(value)
            if isinstance(value, str):
                return float(value)
        if type_tag == "int":
            if isinstance(value, int):
                return value
            if isinstance(value, float) and value.is_integer():
                return int(value)
            if isinstance(value, str):
                return int(value)
    except ValueError:
        pass
    raise TypeError(f"{name!r} has type {type(value).__name__}")


def _render(value: Any, type_tag: str) -> Any:
    if type_tag == "string":
        return value if isinstance(value, str) else repr(value)
    if type_tag == "float":
        return float(value)
    return int(round(float(value)))


def builtin_rows(records: list[dict], fields) -> list[dict]:
    """The solver's hard-coded parser: original flat keys, strict types."""
    rows = []
    for rec in records:
        row = {}
        for f in fields:
            v = rec[f]
            ok = {
                "string": isinstance(v, str),
                "float": isinstance(v, (int, float)) and not isinstance(v, bool),
                "int": isinstance(v, int) and not isinstance(v, bool),
            }[FIELD_TYPES[f]]
            if not ok:
                raise TypeError(f"{f!r} has type {type(v).__name__}")
            row[f] = float(v) if FIELD_TYPES[f] == "float" else v
        rows.append(row)
    return rows


def oracle_p95(latencies) -> float:
    """Nearest-rank 95th percentile."""
    values = sorted(latencies)
    if not values:
        raise EmptyInput("p95 of an empty list")
    return values[math.ceil(0.95 * len(values)) - 1]


def answer_from_rows(template: str, rows: list[dict]) -> dict:
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["endpoint"], []).append(r)
    out: dict[str, Any] = {}
    for ep in sorted(groups):
        g = groups[ep]
        if template == "p95":
            out[ep] = oracle_p95([r["latency_ms"] for r in g])
        elif template == "mean":
            out[ep] = round(math.fsum(r["latency_ms"] for r in g) / len(g), 3)
        elif template == "count_by_status":
            counts: dict[str, int] = {}
            for r in g:
                key = str(r["status"])
                counts[key] = counts.get(key, 0) + 1
            out[ep] = dict(sorted(counts.items()))
        else:
            raise ValueError(f"unknown template {template!r}")
    return out


def _matches(got: Any, expected: Any) -> bool:
    if isinstance(expected, float) and isinstance(got, (int, float)) and not isinstance(got, bool):
        return abs(got - expected) <= FLOAT_TOLERANCE
    if isinstance(expected, dict):
        return isinstance(got, dict) and set(got) == set(expected) and all(_matches(got[k], v) for k, v in expected.items())
    return type(got) is type(expected) and got == expected


# ------------------------------------------------------------- generation

@dataclass(frozen=True)
class GeneratedTask:
    task: TaskInput
    oracle_answer: dict
    checks: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {"task": self.task.to_dict(), "oracle_answer": self.oracle_answer, "checks": list(self.checks)}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratedTask":
        return cls(TaskInput.from_dict(d["task"]), d["oracle_answer"], tuple(d["checks"]))

    def passed(self, answer: Any) -> int:
        if not isinstance(answer, dict):
            return 0
        return sum(1 for c in self.checks if c["key"] in answer and _matches(answer[c["key"]], c["expected"]))

    def score(self, answer: Any) -> float:
        return task_score(self.passed(answer), len(self.checks))


def generate_episode(env: DriftEnvironment, t: int, seed: int | None = None) -> GeneratedTask:
    if t < 0:
        raise ValueError("episode index must be non-negative")
    seed = env.seed if seed is None else seed
    rng = random.Random(f"drift-env:{env.seed}:{seed}:{t}")
    schema = env.schema_at(t)
    n = env.records_per_task
    eps = list(env.endpoints) + [rng.choice(env.endpoints) for _ in range(n - len(env.endpoints))]
    rng.shuffle(eps)
    values = [
        {"endpoint": ep, "latency_ms": round(rng.uniform(5.0, 900.0), 1), "status": rng.choice(STATUS_CODES)}
        for ep in eps
    ]
    records = []
    for v in values:
        rec: dict[str, Any] = {}
        for d in schema:
            val = _render(v[d.canonical], d.type)
            if d.parent:
                rec.setdefault(d.parent, {})[d.name] = val
            else:
                rec[d.name] = val
        records.append(rec)
    template = TEMPLATES[t % len(TEMPLATES)]
    canonical_rows = [
        {d.canonical: coerce(_render(v[d.canonical], d.type), FIELD_TYPES[d.canonical], d.canonical) for d in schema}
        for v in values
    ]
    oracle = answer_from_rows(template, canonical_rows)
    checks = tuple({"key": ep, "expected": oracle[ep]} for ep in sorted(oracle))
    question = {"template": template, "fields": list(TEMPLATE_FIELDS[template])}
    task = TaskInput(t, TEMPLATE_TEXT[template], {"records": records, "question": question}, len(checks))
    return GeneratedTask(task, oracle, checks)


def task_bytes(task: GeneratedTask) -> bytes:
    return canonical_text(task.to_dict()).encode("utf-8")


# ------------------------------------------------------- normalizer tool

def leaf_paths(record: Any, prefix: str = "") -> dict[str, Any]:
    out = {}
    if isinstance(record, dict):
        for k, v in record.items():
            p = f"{prefix}.{k}" if prefix else k
            if isinstance(v, dict):
                out.update(leaf_paths(v, p))
            else:
                out[p] = v
    return out


def lookup(record: Any, path: str) -> Any:
    cur = record
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise KeyError(path)
        cur = cur[part]
    return cur


def normalize_reference(records: list[dict], fields, field_paths: dict[str, list[str]]) -> dict:
    """In-process twin of the normalizer tool; returns the tool's protocol document."""
    out = []
    for rec in records:
        row = {}
        for f in fields:
            for path in field_paths.get(f, [f]):
                try:
                    val = lookup(rec, path)
                    break
                except KeyError:
                    continue
            else:
                return {"success": False, "error": f"KeyError: {f!r}"}
            try:
                row[f] = coerce(val, FIELD_TYPES.get(f, "string"), f)
            except TypeError as exc:
                return {"success": False, "error": f"TypeError: {exc}"}
        out.append(row)
    return {"success": True, "result": out}


_NORMALIZER_TEMPLATE = '''import json
import sys

FIELD_PATHS = {field_paths}
FIELD_TYPES = {field_types}


def lookup(record, path):
    cur = record
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise KeyError(path)
        cur = cur[part]
    return cur


def coerce(value, type_tag, name):
    if isinstance(value, bool):
        raise TypeError("%r has type bool" % name)
    try:
        if type_tag == "string":
            return value if isinstance(value, str) else str(value)
        if type_tag == "float" and isinstance(value, (int, float, str)):
            return float(value)
        if type_tag == "int":
            if isinstance(value, int):
                return value
            if isinstance(value, float) and value.is_integer():
                return int(value)
            if isinstance(value, str):
                return int(value)
    except ValueError:
        pass
    raise TypeError("%r has type %s" % (name, type(value).__name__))


def normalize(records, fields):
    rows = []
    for rec in records:
        row = {{}}
        for f in fields:
            for path in FIELD_PATHS.get(f, [f]):
                try:
                    value = lookup(rec, path)
                    break
                except KeyError:
                    continue
            else:
                return {{"success": False, "error": "KeyError: %r" % f}}
            try:
                row[f] = coerce(value, FIELD_TYPES.get(f, "string"), f)
            except TypeError as exc:
                return {{"success": False, "error": "TypeError: %s" % exc}}
        rows.append(row)
    return {{"success": True, "result": rows}}


args = json.load(sys.stdin)
fields = args.get("fields") or sorted(FIELD_PATHS)
print(json.dumps(normalize(args["records"], fields)))
'''


def render_normalizer(field_paths: dict[str, list[str]]) -> str:
    fp = {k: list(v) for k, v in sorted(field_paths.items())}
    return _NORMALIZER_TEMPLATE.format(field_paths=repr(fp), field_types=repr(dict(sorted(FIELD_TYPES.items()))))


def default_field_paths() -> dict[str, list[str]]:
    return {f: [f] for f in CANONICAL_FIELDS}


# ------------------------------------------------------------------ suites

def canonical_drift_suite(seed: int = 0) -> DriftEnvironment:
    """One rename at episode 10; it breaks every question template."""
    return DriftEnvironment(drift_schedule=((10, rename("endpoint", "route")),), seed=seed)


def three_drift_suite(seed: int = 0) -> DriftEnvironment:
    return DriftEnvironment(
        drift_schedule=(
            (2, rename("latency_ms", "latency_millis")),
            (12, nest("endpoint", "request")),
            (22, rename("status", "status_code")),
        ),
        seed=seed,
    )


SUITES = {"canonical_drift": canonical_drift_suite, "three_drift": three_drift_suite}


def schema_doc(field_paths: dict[str, list[str]] | None = None) -> KnowledgeDoc:
    body = {"fields": field_paths or default_field_paths(), "types": dict(FIELD_TYPES)}
    return KnowledgeDoc("schema", "Log record schema", body, ("logs", "latency", "status", "endpoint"))


def seed_state(registry) -> None:
    """Initial artifact state: the original log schema and nothing else."""
    registry.put_artifact(ArtifactKind.KNOWLEDGE, SCHEMA_DOC, schema_doc())
