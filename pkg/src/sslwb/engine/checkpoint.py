"""Binary checkpoint archive.

Layout (little-endian)::

    b"SSLWB" | u32 format_version | 32-byte config digest
    u32 metadata length | metadata (UTF-8 JSON, sorted keys)
    payload: float32 arrays back to back, in metadata["arrays"] order
    32-byte SHA-256 of everything above

The metadata lists every array as ``[name, shape]``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"SSLWB"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    method: str
    epoch: int
    student: dict[str, np.ndarray]
    config: dict[str, Any]
    config_digest: bytes
    teacher: dict[str, np.ndarray] | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    state: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"student/{k}", v) for k, v in self.student.items()]
        if self.teacher is not None:
            out += [(f"teacher/{k}", v) for k, v in self.teacher.items()]
        out += [(f"optimizer/{k}", v) for k, v in self.optimizer.items()]
        out += [(f"state/{k}", v) for k, v in self.state.items()]
        return out

    def backbone(self) -> dict[str, np.ndarray]:
        prefix = "backbone."
        return {k[len(prefix):]: v for k, v in self.student.items() if k.startswith(prefix)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    arrays = ckpt.arrays()
    meta = {
        "method": ckpt.method,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "has_teacher": ckpt.teacher is not None,
        "meta": ckpt.meta,
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.format_version), ckpt.config_digest, struct.pack("<I", len(meta_bytes)), meta_bytes]
    for _, a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 + 32 + 4 + 32:
        raise CheckpointError("corrupt checkpoint: file truncated")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError("corrupt checkpoint: digest mismatch")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    digest = body[off : off + 32]
    off += 32
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off : off + meta_len].decode("utf-8"))
    off += meta_len
    groups: dict[str, dict[str, np.ndarray]] = {"student": {}, "teacher": {}, "optimizer": {}, "state": {}}
    for name, shape in meta["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
        group, key = name.split("/", 1)
        groups[group][key] = a
    if off != len(body):
        raise CheckpointError("corrupt checkpoint: payload size mismatch")
    return Checkpoint(
        method=meta["method"],
        epoch=meta["epoch"],
        student=groups["student"],
        config=meta["config"],
        config_digest=digest,
        teacher=groups["teacher"] if meta["has_teacher"] else None,
        optimizer=groups["optimizer"],
        state=groups["state"],
        meta=meta["meta"],
        format_version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return from_bytes(data)
