"""Stable content hashing for configs and output stamping."""

from __future__ import annotations

import hashlib
import json

__all__ = ["canonical_hash"]


def canonical_hash(obj) -> str:
    """12-hex digest of a JSON-serializable object, invariant to dict key
    order (keys are sorted before hashing)."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
