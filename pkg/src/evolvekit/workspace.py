"""On-disk workspace: registry, evidence, audit log and review queue under one root."""

from __future__ import annotations

import contextlib
import os
from pathlib import Path

from .canonical import canonical_bytes, loads
from .drift import seed_state
from .errors import ConfigError, WorkspaceLocked
from .evidence import EvidenceLog
from .governance import AuditLog, ReviewQueue
from .registry import Registry
from .sandbox import Sandbox

MARKER = "workspace.json"
LOCK = ".lock"


class Workspace:
    """All persistent state of one deployment.

    Time is logical: every timestamp is the audit log length at that moment,
    which keeps replays of the same run byte-identical.
    """

    def __init__(self, root: str | Path | None = None, sandbox: Sandbox | None = None):
        self.root = Path(root) if root is not None else None
        self.audit = AuditLog(self.root, clock=self.clock)
        self.registry = Registry(self.root, clock=self.clock)
        self.evidence = EvidenceLog(self.root)
        self.reviews = ReviewQueue(self.root, clock=self.clock)
        self.sandbox = sandbox or Sandbox()

    def clock(self) -> float:
        audit = getattr(self, "audit", None)
        return float(len(audit)) if audit is not None else 0.0

    @classmethod
    def in_memory(cls, seed: bool = True, sandbox: Sandbox | None = None) -> "Workspace":
        ws = cls(None, sandbox)
        if seed:
            seed_state(ws.registry)
            ws.registry.take_snapshot(0)
        return ws

    @classmethod
    def init(cls, root: str | Path, sandbox: Sandbox | None = None) -> "Workspace":
        root = Path(root)
        if (root / MARKER).exists():
            raise ConfigError(f"{root} is already a workspace")
        for sub in ("registry", "evidence", "audit", "reviews", "snapshots"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        (root / MARKER).write_bytes(canonical_bytes({"format": 1}))
        ws = cls(root, sandbox)
        seed_state(ws.registry)
        ws.registry.take_snapshot(0)
        return ws

    @classmethod
    def open(cls, root: str | Path, sandbox: Sandbox | None = None) -> "Workspace":
        root = Path(root)
        if not (root / MARKER).exists():
            raise ConfigError(f"{root} is not an initialized workspace (run `init` first)")
        loads((root / MARKER).read_bytes())
        return cls(root, sandbox)

    @contextlib.contextmanager
    def lock(self):
        """Exclusive run lock; a second holder gets WorkspaceLocked and touches nothing."""
        if self.root is None:
            yield self
            return
        path = self.root / LOCK
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            raise WorkspaceLocked(f"{self.root} is locked by another run ({path})") from None
        try:
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            yield self
        finally:
            path.unlink(missing_ok=True)
