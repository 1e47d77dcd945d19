"""Canonical serialization and digests.

Every hash in the system is SHA-256 over a canonical byte form: either the
chunk wire encoding (see ark.chunk) or canonical JSON.  Canonical JSON is
UTF-8, lexicographically sorted keys, no insignificant whitespace, floats in
shortest round-trip decimal form (Python repr), NaN/Inf rejected.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_json_bytes(obj: Any) -> bytes:
    return json.dumps(
        obj,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_obj(obj: Any) -> str:
    """Digest of the canonical JSON form of obj."""
    return sha256_hex(canonical_json_bytes(obj))


def is_hex_digest(s: str) -> bool:
    return len(s) == 64 and all(c in "0123456789abcdef" for c in s)
