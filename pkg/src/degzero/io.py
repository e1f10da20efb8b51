"""Deterministic, atomic output helpers and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "atomic_write_text",
    "atomic_write_bytes",
    "dump_json",
    "to_jsonable",
    "write_csv",
    "sha256_file",
    "Manifest",
]


def atomic_write_bytes(path, data: bytes) -> Path:
    """Write to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def to_jsonable(obj):
    """Convert numpy containers and scalars to plain Python types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def dump_json(obj, path=None) -> str:
    """Serialize with sorted keys; write atomically when a path is given."""
    text = json.dumps(to_jsonable(obj), sort_keys=True, indent=1) + "\n"
    if path is not None:
        atomic_write_text(path, text)
    return text


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()):
    """CSV with optional ``#`` comment lines and full-precision floats."""
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Record of every artifact a run produced, with content hashes."""

    def __init__(self, root, seed: int, config_text: str = ""):
        self.root = Path(root)
        self.seed = int(seed)
        self.config_hash = hashlib.sha256(config_text.encode()).hexdigest()
        self.entries: list[dict] = []
        self.errors: list[dict] = []

    def add(self, path, stage: str, partial: bool = False):
        path = Path(path)
        self.entries.append({
            "file": str(path.relative_to(self.root)) if path.is_relative_to(self.root) else str(path),
            "stage": stage,
            "sha256": sha256_file(path),
            "bytes": path.stat().st_size,
            "partial": bool(partial),
        })

    def error(self, stage: str, kind: str, message: str):
        self.errors.append({"stage": stage, "kind": kind, "message": message})

    def write(self, name: str = "manifest.json") -> Path:
        doc = {"seed": self.seed, "config_sha256": self.config_hash,
               "files": sorted(self.entries, key=lambda e: e["file"]),
               "errors": self.errors}
        p = self.root / name
        dump_json(doc, p)
        return p
