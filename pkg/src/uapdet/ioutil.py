"""Helpers for deterministic, atomically written artifact files.

Every artifact this package emits (checkpoints, manifests, traces, summaries)
goes through these functions so that two runs with the same config produce
byte-identical output directories.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
from pathlib import Path

import numpy as np


def canonical_json(obj) -> str:
    """Stable JSON encoding: sorted keys, fixed separators, no trailing space."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_bytes_atomic(path, data: bytes) -> None:
    """Write through a sibling temp file + rename so partial files never appear."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_text_atomic(path, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def write_json_atomic(path, obj) -> None:
    write_text_atomic(path, canonical_json(obj) + "\n")


def read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def encode_array(arr: np.ndarray) -> dict:
    """JSON-safe array encoding that preserves exact bits (incl. byte order)."""
    arr = np.ascontiguousarray(arr)
    return {
        "dtype": arr.dtype.str,
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_array(spec: dict) -> np.ndarray:
    raw = base64.b64decode(spec["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(spec["dtype"]))
    return arr.reshape(spec["shape"]).copy()


def fmt_float(x) -> str:
    """Shortest decimal text that round-trips the float64 exactly."""
    return repr(float(x))
