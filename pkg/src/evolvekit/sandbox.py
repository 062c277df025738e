"""Subprocess tool workspace.

Child protocol: one UTF-8 JSON object on stdin, one JSON object on stdout,
either ``{"success": true, "result": ...}`` or ``{"success": false, "error": "..."}``.
Each run gets a fresh scratch directory (deleted afterwards) and an
environment containing only allow-listed variables.
"""

from __future__ import annotations

import json
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from .artifacts import (
    ArtifactId,
    ArtifactKind,
    ExecutionLimits,
    Payload,
    ToolSpec,
    ValidationCase,
    check_payload,
)
from .canonical import canonical_bytes, canonical_text
from .errors import InvalidPayload, SandboxUnavailable, SignatureViolation, UnresolvableTarget

DEFAULT_INTERPRETER = (sys.executable, "-I", "-S", "{script}")

_TYPE_CHECKS = {
    "string": lambda v: isinstance(v, str),
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "bool": lambda v: isinstance(v, bool),
    "object": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
}


@dataclass(frozen=True)
class ToolResult:
    success: bool
    result: Any = None
    error: str | None = None
    duration_ms: float = 0.0
    truncated: bool = False

    def to_payload(self) -> dict:
        """Deterministic view (no timing) for trajectories and audit payloads."""
        doc: dict = {"success": self.success, "truncated": self.truncated}
        if self.success:
            doc["result"] = self.result
        else:
            doc["error"] = self.error
        return doc


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    check_kind: str
    passed: bool
    detail: str = ""
    duration_ms: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        doc = {"check_id": self.check_id, "check_kind": self.check_kind, "passed": self.passed, "detail": self.detail}
        if timing:
            doc["duration_ms"] = self.duration_ms
        return doc


def check_signature(tool: ToolSpec, args: Any) -> None:
    if not isinstance(args, dict):
        raise SignatureViolation("arguments must be a JSON object")
    declared = {p.name: p for p in tool.parameters}
    unknown = sorted(set(args) - set(declared))
    if unknown:
        raise SignatureViolation(f"unknown arguments: {', '.join(unknown)}")
    for p in tool.parameters:
        if p.name not in args:
            if p.required:
                raise SignatureViolation(f"missing required argument {p.name!r}")
            continue
        if not _TYPE_CHECKS[p.type_tag](args[p.name]):
            raise SignatureViolation(f"argument {p.name!r} is not of type {p.type_tag}")


def dry_parse(tool: ToolSpec, check_id: str = "syntax") -> CheckResult:
    """Compile the entrypoint without running it."""
    start = time.monotonic()
    try:
        compile(tool.entrypoint, "<entrypoint>", "exec", dont_inherit=True)
    except SyntaxError as exc:
        detail = f"SyntaxError: {exc.msg} (line {exc.lineno})"
        return CheckResult(check_id, "syntax", False, detail, _ms(start))
    except ValueError as exc:
        return CheckResult(check_id, "syntax", False, f"ValueError: {exc}", _ms(start))
    return CheckResult(check_id, "syntax", True, "ok", _ms(start))


def _ms(start: float) -> float:
    return (time.monotonic() - start) * 1000.0


def expectation_holds(expectation: dict, result: ToolResult) -> tuple[bool, str]:
    kind = expectation.get("kind")
    if not result.success:
        return False, result.error or "tool failed"
    if kind == "success_flag_true":
        return True, "ok"
    if kind == "exact_match":
        if result.result == expectation["value"]:
            return True, "ok"
        return False, f"expected {canonical_text(expectation['value'])[:200]}, got {canonical_text(result.result)[:200]}"
    if kind == "contains":
        text = result.result if isinstance(result.result, str) else canonical_text(result.result)
        if expectation["value"] in text:
            return True, "ok"
        return False, f"output does not contain {expectation['value']!r}"
    return False, f"unknown expectation {kind!r}"


class Sandbox:
    """Runs tool entrypoints in isolated child processes, at most `pool_size` at a time."""

    def __init__(self, interpreter: Sequence[str] | None = None, pool_size: int = 4, scratch_root: str | None = None):
        self.interpreter = tuple(interpreter or DEFAULT_INTERPRETER)
        if not any("{script}" in part for part in self.interpreter):
            raise ValueError("interpreter template must contain {script}")
        self.scratch_root = scratch_root
        self._slots = threading.BoundedSemaphore(max(1, pool_size))
        self._count_lock = threading.Lock()
        self.executions = 0

    def dry_parse(self, tool: ToolSpec, check_id: str = "syntax") -> CheckResult:
        return dry_parse(tool, check_id)

    def execute_tool(self, tool: ToolSpec, args: Any, limits: ExecutionLimits | None = None) -> ToolResult:
        limits = limits or ExecutionLimits()
        check_signature(tool, args)
        with self._slots:
            with self._count_lock:
                self.executions += 1
            return self._run(tool.entrypoint, args, limits)

    def _run(self, source: str, args: Any, limits: ExecutionLimits) -> ToolResult:
        scratch = tempfile.mkdtemp(prefix="evk-tool-", dir=self.scratch_root)
        try:
            script = os.path.join(scratch, "tool.py")
            with open(script, "w", encoding="utf-8") as fh:
                fh.write(source)
            cmd = [part.replace("{script}", script) for part in self.interpreter]
            env = {k: os.environ[k] for k in limits.env_allowlist if k in os.environ}
            start = time.monotonic()
            try:
                proc = subprocess.Popen(
                    cmd,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.PIPE,
                    cwd=scratch,
                    env=env,
                    start_new_session=True,
                )
            except OSError as exc:
                raise SandboxUnavailable(f"cannot start interpreter {cmd[0]!r}: {exc}") from None
            try:
                out, err = proc.communicate(canonical_bytes(args), timeout=limits.wall_time_ms / 1000.0)
            except subprocess.TimeoutExpired:
                _kill(proc)
                proc.communicate()
                return ToolResult(False, error="timeout", duration_ms=_ms(start))
            duration = _ms(start)
            return _interpret(out, err, proc.returncode, limits, duration, scratch)
        finally:
            shutil.rmtree(scratch, ignore_errors=True)

    def run_validation_case(
        self,
        case: ValidationCase,
        shadow_state: Mapping[ArtifactId, Payload],
        limits: ExecutionLimits | None = None,
        check_id: str = "case",
    ) -> CheckResult:
        start = time.monotonic()
        for target in case.targets:
            if target not in shadow_state:
                raise UnresolvableTarget(str(target))
        failures = []
        for target in case.targets:
            payload = shadow_state[target]
            if case.check_kind == "schema":
                try:
                    check_payload(target.kind, payload)
                except InvalidPayload as exc:
                    failures.append(f"{target}: {exc}")
            elif target.kind != ArtifactKind.TOOL:
                failures.append(f"{target}: {case.check_kind} checks need a tool target")
            elif case.check_kind == "syntax":
                res = dry_parse(payload)
                if not res.passed:
                    failures.append(f"{target}: {res.detail}")
            else:
                try:
                    result = self.execute_tool(payload, case.fixture_input, limits or case.limits)
                except SignatureViolation as exc:
                    failures.append(f"{target}: signature violation: {exc}")
                    continue
                ok, detail = expectation_holds(case.expectation, result)
                if not ok:
                    failures.append(f"{target}: {detail}")
        if failures:
            return CheckResult(check_id, case.check_kind, False, "; ".join(failures), _ms(start))
        return CheckResult(check_id, case.check_kind, True, "ok", _ms(start))


def _kill(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def _tail(err: bytes, scratch: str) -> str:
    text = err.decode("utf-8", "replace").replace(scratch, "<scratch>").strip()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    return lines[-1] if lines else ""


def _interpret(out: bytes, err: bytes, returncode: int, limits: ExecutionLimits, duration: float, scratch: str) -> ToolResult:
    if len(out) > limits.max_stdout_bytes:
        return ToolResult(False, error=f"output exceeded {limits.max_stdout_bytes} bytes", duration_ms=duration, truncated=True)
    if returncode != 0:
        tail = _tail(err, scratch)
        return ToolResult(False, error=f"exit status {returncode}: {tail}" if tail else f"exit status {returncode}", duration_ms=duration)
    try:
        doc = json.loads(out.decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        return ToolResult(False, error="protocol error: output is not a JSON document", duration_ms=duration)
    if not isinstance(doc, dict) or not isinstance(doc.get("success"), bool):
        return ToolResult(False, error="protocol error: missing boolean 'success'", duration_ms=duration)
    if doc["success"]:
        if "result" not in doc or "error" in doc:
            return ToolResult(False, error="protocol error: success document needs 'result' and no 'error'", duration_ms=duration)
        return ToolResult(True, result=doc["result"], duration_ms=duration)
    if not isinstance(doc.get("error"), str) or "result" in doc:
        return ToolResult(False, error="protocol error: failure document needs a string 'error'", duration_ms=duration)
    return ToolResult(False, error=doc["error"].replace(scratch, "<scratch>"), duration_ms=duration)
