"""Checkpoint files: one JSON manifest line, then one tensor block per parameter."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .serialize import read_tensor, write_tensor

CHECKPOINT_FORMAT = "exchanger-checkpoint"
CHECKPOINT_VERSION = 1


def config_hash(*configs: dict) -> str:
    blob = json.dumps(list(configs), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def param_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = dict(manifest)
    manifest["format"] = CHECKPOINT_FORMAT
    manifest["version"] = CHECKPOINT_VERSION
    manifest["parameters"] = [{"name": k, "shape": list(np.shape(v)) or [1]} for k, v in arrays.items()]
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n")
        for value in arrays.values():
            write_tensor(fh, np.asarray(value))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        try:
            manifest = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint manifest: not valid JSON ({exc})") from None
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"checkpoint format: expected {CHECKPOINT_FORMAT!r}, found {manifest.get('format')!r}")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint version: expected {CHECKPOINT_VERSION}, found {manifest.get('version')!r}")
        arrays = {}
        for entry in manifest.get("parameters", []):
            value = read_tensor(fh)
            if list(value.shape) != list(entry["shape"]):
                raise FormatError(f"checkpoint parameter {entry['name']}: shape {value.shape} != {entry['shape']}")
            arrays[entry["name"]] = value
        if fh.read(1):
            raise FormatError("checkpoint: trailing bytes after the last parameter")
    return manifest, arrays


def checkpoint_bytes_equal(a, b) -> bool:
    return Path(a).read_bytes() == Path(b).read_bytes()
