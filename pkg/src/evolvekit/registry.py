"""Versioned, content-addressed artifact store for the knowledge/tool/validation registries.

Every write appends a new immutable version. Pruning is logical: it appends a
tombstone version (same payload, status ``pruned``) so that snapshots, diffs and
rollback see it like any other change. Heads can be moved back with
``restore_snapshot``; versions written after the restored snapshot stay on disk
but are no longer reachable from the heads.
"""

from __future__ import annotations

import contextlib
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping

from .artifacts import (
    ArtifactId,
    ArtifactKind,
    Payload,
    check_payload,
    payload_bytes,
    payload_from_dict,
)
from .canonical import canonical_bytes, digest, digest_bytes, loads
from .errors import (
    AlreadyPruned,
    ArtifactPruned,
    DuplicateId,
    InvalidPayload,
    NotFound,
    StaleBase,
    StorageFailure,
    UnknownSnapshot,
    VersionOutOfRange,
)

ACTIVE = "active"
PRUNED = "pruned"


@dataclass(frozen=True)
class VersionedArtifact:
    id: ArtifactId
    version: int
    content_digest: str
    payload: Payload
    status: str
    provenance_ref: int | None
    created_episode: int


@dataclass(frozen=True)
class HeadEntry:
    version: int
    digest: str
    status: str

    def to_dict(self) -> dict:
        return {"version": self.version, "digest": self.digest, "status": self.status}


@dataclass(frozen=True)
class StateSnapshot:
    snapshot_id: str
    heads: Mapping[ArtifactId, HeadEntry]
    episode_index: int
    created_at: float

    def heads_dump(self) -> dict:
        return {str(k): v.to_dict() for k, v in sorted(self.heads.items())}

    def to_dict(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "heads": self.heads_dump(),
            "episode_index": self.episode_index,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StateSnapshot":
        heads = {ArtifactId.parse(k): HeadEntry(**v) for k, v in d["heads"].items()}
        return cls(d["snapshot_id"], heads, int(d["episode_index"]), d["created_at"])


@dataclass(frozen=True)
class ChangeSet:
    added: tuple[ArtifactId, ...] = ()
    modified: tuple[tuple[ArtifactId, int, int], ...] = ()
    pruned: tuple[ArtifactId, ...] = ()
    # ids present in `a` but absent from `b` (only reachable when diffing backwards across a restore)
    removed: tuple[ArtifactId, ...] = ()

    def is_empty(self) -> bool:
        return not (self.added or self.modified or self.pruned or self.removed)

    def __len__(self) -> int:
        return len(self.added) + len(self.modified) + len(self.pruned) + len(self.removed)

    def to_dict(self) -> dict:
        return {
            "added": [str(i) for i in self.added],
            "modified": [[str(i), a, b] for i, a, b in self.modified],
            "pruned": [str(i) for i in self.pruned],
            "removed": [str(i) for i in self.removed],
        }


def snapshot_id_for(heads: Mapping[ArtifactId, HeadEntry]) -> str:
    """Digest over the sorted (id, head version, content digest) triples."""
    triples = sorted([str(k), v.version, v.digest] for k, v in heads.items())
    return digest(triples)


@dataclass(frozen=True)
class _Record:
    version: int
    digest: str
    status: str
    provenance_ref: int | None
    created_episode: int
    data: bytes

    def meta(self) -> dict:
        return {
            "version": self.version,
            "digest": self.digest,
            "status": self.status,
            "provenance_ref": self.provenance_ref,
            "created_episode": self.created_episode,
        }


class Registry:
    """The persistent artifact state. Single writer, many readers."""

    def __init__(self, root: str | Path | None = None, clock: Callable[[], float] | None = None):
        self.root = Path(root) if root is not None else None
        self.clock = clock or time.time
        self.fault_hook: Callable[[str, ArtifactId], None] | None = None
        self._lock = threading.RLock()
        self._versions: dict[ArtifactId, list[_Record]] = {}
        self._heads: dict[ArtifactId, int] = {}
        self._snapshots: dict[str, StateSnapshot] = {}
        self._journal: list[tuple[Path, bytes | None]] | None = None
        if self.root is not None:
            self._load()

    # ---- persistence -------------------------------------------------

    def _write_file(self, path: Path, data: bytes) -> None:
        if self._journal is not None:
            missing = [d for d in (path.parent, *path.parent.parents) if not d.exists()]
            for d in reversed(missing):  # shallowest first, so rollback removes deepest first
                self._journal.append((d, None))
            self._journal.append((path, path.read_bytes() if path.exists() else None))
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def _persist_id(self, aid: ArtifactId, record: _Record) -> None:
        if self.root is None:
            return
        base = self.root / "registry" / aid.kind.value / aid.name
        self._write_file(base / f"v{record.version}.artifact", record.data)
        self._write_file(base / "versions.json", canonical_bytes([r.meta() for r in self._versions[aid]]))

    def _persist_index(self) -> None:
        if self.root is None or self._journal is not None:
            return
        self._write_file(self.root / "registry" / "index.json", canonical_bytes(self._index_doc()))

    def _index_doc(self) -> dict:
        return {str(k): v.to_dict() for k, v in sorted(self._head_entries().items())}

    def _load(self) -> None:
        reg = self.root / "registry"
        if reg.exists():
            for kind in ArtifactKind:
                kdir = reg / kind.value
                if not kdir.is_dir():
                    continue
                for ndir in sorted(kdir.iterdir()):
                    meta_path = ndir / "versions.json"
                    if not meta_path.exists():
                        continue
                    aid = ArtifactId(kind, ndir.name)
                    records = []
                    for m in loads(meta_path.read_bytes()):
                        data = (ndir / f"v{m['version']}.artifact").read_bytes()
                        if digest_bytes(data) != m["digest"]:
                            raise StorageFailure(f"digest mismatch for {aid} v{m['version']}")
                        records.append(_Record(data=data, **m))
                    self._versions[aid] = records
            index_path = reg / "index.json"
            if index_path.exists():
                for key, entry in loads(index_path.read_bytes()).items():
                    self._heads[ArtifactId.parse(key)] = int(entry["version"])
        snaps = self.root / "snapshots"
        if snaps.exists():
            for p in sorted(snaps.glob("*.json")):
                snap = StateSnapshot.from_dict(loads(p.read_bytes()))
                self._snapshots[snap.snapshot_id] = snap

    # ---- transactions ------------------------------------------------

    @contextlib.contextmanager
    def transaction(self) -> Iterator["Registry"]:
        """All-or-nothing batch of writes. Any exception restores memory and disk."""
        with self._lock:
            if self._journal is not None:
                yield self
                return
            saved_versions = {k: list(v) for k, v in self._versions.items()}
            saved_heads = dict(self._heads)
            self._journal = []
            try:
                yield self
            except BaseException:
                journal, self._journal = self._journal, None
                for path, old in reversed(journal):
                    path.with_name(path.name + ".tmp").unlink(missing_ok=True)
                    if old is not None:
                        path.write_bytes(old)
                    elif path.is_dir():
                        path.rmdir()
                    else:
                        path.unlink(missing_ok=True)
                self._versions = saved_versions
                self._heads = saved_heads
                raise
            self._journal = None
            self._persist_index()

    def _fault(self, op: str, aid: ArtifactId) -> None:
        if self.fault_hook is not None:
            self.fault_hook(op, aid)

    # ---- reads -------------------------------------------------------

    def _record(self, aid: ArtifactId, version: int) -> _Record:
        return self._versions[aid][version - 1]

    def _materialize(self, aid: ArtifactId, rec: _Record) -> VersionedArtifact:
        payload = payload_from_dict(aid.kind, loads(rec.data))
        return VersionedArtifact(aid, rec.version, rec.digest, payload, rec.status, rec.provenance_ref, rec.created_episode)

    def exists(self, aid: ArtifactId) -> bool:
        """True if the id has ever been stored, whether live, pruned or detached by a restore."""
        return aid in self._versions

    def head_version(self, aid: ArtifactId) -> int:
        if aid not in self._heads:
            raise NotFound(str(aid))
        return self._heads[aid]

    def get_artifact(self, aid: ArtifactId, version: int | None = None) -> VersionedArtifact:
        with self._lock:
            if aid not in self._heads:
                raise NotFound(str(aid))
            if version is None:
                version = self._heads[aid]
            elif not 1 <= version <= len(self._versions[aid]):
                raise VersionOutOfRange(f"{aid} has no version {version}")
            return self._materialize(aid, self._record(aid, version))

    def stored_versions(self, aid: ArtifactId) -> list[int]:
        return [r.version for r in self._versions.get(aid, [])]

    def ids(self) -> list[ArtifactId]:
        return sorted(self._heads)

    def heads(self) -> dict[ArtifactId, HeadEntry]:
        with self._lock:
            return self._head_entries()

    def _head_entries(self) -> dict[ArtifactId, HeadEntry]:
        out = {}
        for aid, v in self._heads.items():
            rec = self._record(aid, v)
            out[aid] = HeadEntry(v, rec.digest, rec.status)
        return out

    def view(self, snapshot: StateSnapshot, active_only: bool = True) -> dict[ArtifactId, VersionedArtifact]:
        """Materialize the artifacts a snapshot points at."""
        self.require_snapshot(snapshot.snapshot_id)
        out = {}
        for aid, entry in sorted(snapshot.heads.items()):
            if active_only and entry.status != ACTIVE:
                continue
            out[aid] = self._materialize(aid, self._record(aid, entry.version))
        return out

    # ---- writes ------------------------------------------------------

    def _append(self, aid: ArtifactId, data: bytes, status: str, provenance, episode: int) -> VersionedArtifact:
        versions = self._versions.setdefault(aid, [])
        rec = _Record(len(versions) + 1, digest_bytes(data), status, provenance, int(episode), data)
        versions.append(rec)
        self._heads[aid] = rec.version
        self._persist_id(aid, rec)
        self._persist_index()
        return self._materialize(aid, rec)

    def put_artifact(self, kind, name: str, payload: Payload, provenance: int | None = None, episode: int = 0) -> VersionedArtifact:
        aid = ArtifactId(ArtifactKind(kind), name)
        with self._lock:
            # an id detached by a restore may be re-added; it continues its version list
            if aid in self._heads:
                raise DuplicateId(str(aid))
            check_payload(aid.kind, payload)
            self._fault("put", aid)
            return self._append(aid, payload_bytes(payload), ACTIVE, provenance, episode)

    def patch_artifact(self, aid: ArtifactId, base_version: int, payload: Payload, provenance: int | None = None, episode: int = 0) -> VersionedArtifact:
        with self._lock:
            if aid not in self._heads:
                raise NotFound(str(aid))
            head = self._heads[aid]
            if self._record(aid, head).status == PRUNED:
                raise ArtifactPruned(str(aid))
            if base_version != head:
                raise StaleBase(f"{aid}: base version {base_version} but head is {head}")
            check_payload(aid.kind, payload)
            self._fault("patch", aid)
            return self._append(aid, payload_bytes(payload), ACTIVE, provenance, episode)

    def prune_artifact(self, aid: ArtifactId, provenance: int | None = None, episode: int = 0) -> VersionedArtifact:
        with self._lock:
            if aid not in self._heads:
                raise NotFound(str(aid))
            rec = self._record(aid, self._heads[aid])
            if rec.status == PRUNED:
                raise AlreadyPruned(str(aid))
            self._fault("prune", aid)
            return self._append(aid, rec.data, PRUNED, provenance, episode)

    # ---- snapshots ---------------------------------------------------

    def take_snapshot(self, episode: int = 0) -> StateSnapshot:
        with self._lock:
            heads = self._head_entries()
            sid = snapshot_id_for(heads)
            existing = self._snapshots.get(sid)
            if existing is not None:
                return existing
            snap = StateSnapshot(sid, dict(sorted(heads.items())), int(episode), self.clock())
            self._snapshots[sid] = snap
            if self.root is not None:
                # snapshot files are outside any transaction: they are immutable and content-addressed
                path = self.root / "snapshots" / f"{sid}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(canonical_bytes(snap.to_dict()))
            return snap

    def current_snapshot_id(self) -> str:
        with self._lock:
            return snapshot_id_for(self._head_entries())

    def require_snapshot(self, snapshot_id: str) -> StateSnapshot:
        try:
            return self._snapshots[snapshot_id]
        except KeyError:
            raise UnknownSnapshot(snapshot_id) from None

    def snapshots(self) -> list[StateSnapshot]:
        return sorted(self._snapshots.values(), key=lambda s: (s.created_at, s.episode_index, s.snapshot_id))

    def restore_snapshot(self, snapshot_id: str) -> StateSnapshot:
        with self._lock:
            target = self.require_snapshot(snapshot_id)
            self._heads = {aid: e.version for aid, e in target.heads.items()}
            self._persist_index()
            return self.take_snapshot(target.episode_index)

    def diff_snapshots(self, a: StateSnapshot, b: StateSnapshot) -> ChangeSet:
        self.require_snapshot(a.snapshot_id)
        self.require_snapshot(b.snapshot_id)
        added, modified, pruned, removed = [], [], [], []
        for aid in sorted(set(a.heads) | set(b.heads)):
            ea, eb = a.heads.get(aid), b.heads.get(aid)
            if ea is None:
                (pruned if eb.status == PRUNED else added).append(aid)
            elif eb is None:
                removed.append(aid)
            elif ea.version != eb.version or ea.digest != eb.digest:
                if ea.status == ACTIVE and eb.status == PRUNED:
                    pruned.append(aid)
                else:
                    modified.append((aid, ea.version, eb.version))
        return ChangeSet(tuple(added), tuple(modified), tuple(pruned), tuple(removed))

    # ---- introspection -----------------------------------------------

    def fingerprint(self) -> bytes:
        """Canonical bytes of the entire store (every version plus heads)."""
        with self._lock:
            doc = {
                "heads": {str(k): v for k, v in sorted(self._heads.items())},
                "versions": {
                    str(k): [dict(r.meta(), data=r.data.decode("utf-8")) for r in recs]
                    for k, recs in sorted(self._versions.items())
                },
            }
            return canonical_bytes(doc)

    def verify_digests(self) -> bool:
        return all(digest_bytes(r.data) == r.digest for recs in self._versions.values() for r in recs)


def validate_stored_payload(kind: ArtifactKind, data: bytes) -> Payload:
    payload = payload_from_dict(kind, loads(data))
    check_payload(kind, payload)
    if payload_bytes(payload) != data:
        raise InvalidPayload("stored bytes are not canonical")
    return payload
