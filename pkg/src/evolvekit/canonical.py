"""Canonical JSON bytes and digests.

Keys are sorted lexicographically and no insignificant whitespace is emitted,
so equal documents always produce equal bytes (and equal digests).
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

GENESIS_DIGEST = "0" * 64


def canonical_bytes(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def canonical_text(obj: Any) -> str:
    return canonical_bytes(obj).decode("utf-8")


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest(obj: Any) -> str:
    return digest_bytes(canonical_bytes(obj))


def loads(data: bytes | str) -> Any:
    return json.loads(data)
