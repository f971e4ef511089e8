"""Run provenance: stable hashes of configs."""

import hashlib
import json
from dataclasses import asdict, is_dataclass
from typing import Any


def _normalize(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return _normalize(asdict(value))
    if isinstance(value, dict):
        return {str(k): _normalize(v) for k, v in sorted(value.items(), key=lambda kv: str(kv[0]))}
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    if callable(value):
        return getattr(value, "__name__", "callable")
    if hasattr(value, "item"):
        return value.item()
    return value


def deterministic_hash(value: Any) -> str:
    """Short hash of a config (unlike Python's hash(), stable across processes)."""
    text = json.dumps(_normalize(value), sort_keys=True, default=str)
    return hashlib.md5(text.encode("utf-8")).hexdigest()[:12]
