"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ABFTCKPT" | u32 version | u64 config length | config (UTF-8 JSON)
    per tensor in canonical order: u16 rank | u64 extent * rank | float32 data
    8-byte blake2b digest of everything before it
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerModel, param_shapes
from .tensor import Tensor

MAGIC = b"ABFTCKPT"
VERSION = 1
_DIGEST = 8


class CheckpointError(Exception):
    """Load failure; ``kind`` is one of magic, version, truncated, checksum, format."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_DIGEST).digest()


def encode(model: TransformerModel, extra: dict | None = None) -> bytes:
    config = {"model": model.config.to_dict(), "extra": extra or {}}
    text = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(text)), text]
    for name, shape in param_shapes(model.config).items():
        arr = model[name].data
        if arr.shape != shape:
            raise CheckpointError("format", f"{name} has shape {arr.shape}, expected {shape}")
        parts.append(struct.pack("<H", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _digest(body)


def save_checkpoint(path, model: TransformerModel, extra: dict | None = None) -> None:
    """Write atomically: the file either appears complete or not at all."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model, extra))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated", f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> tuple[TransformerModel, dict]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("magic", "not an ABFT checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError("version", f"file version {version}, reader supports {VERSION}")
    (n,) = r.unpack("<Q")
    try:
        config = json.loads(r.take(n).decode("utf-8"))
        mcfg = ModelConfig(**config["model"])
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError("format", f"bad config text: {exc}") from exc
    arrays = {}
    for name, shape in param_shapes(mcfg).items():
        (rank,) = r.unpack("<H")
        extents = r.unpack(f"<{rank}Q")
        if tuple(extents) != shape:
            raise CheckpointError("format", f"{name}: stored shape {extents}, architecture needs {shape}")
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    stored = r.take(_DIGEST)
    if r.pos != len(data):
        raise CheckpointError("format", f"{len(data) - r.pos} trailing bytes after checksum")
    if _digest(data[:r.pos - _DIGEST]) != stored:
        raise CheckpointError("checksum", "payload digest mismatch")
    params = {k: Tensor(v, trainable=True, name=k) for k, v in arrays.items()}
    return TransformerModel(mcfg, params), config.get("extra", {})


def load_checkpoint(path, model: TransformerModel | None = None) -> tuple[TransformerModel, dict]:
    """Return ``(model, extra)``; with ``model`` given, its parameters are overwritten in place."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError("format", f"cannot read {path}: {exc}") from exc
    loaded, extra = decode(data)
    if model is None:
        return loaded, extra
    if model.config.to_dict() | {"seed": 0} != loaded.config.to_dict() | {"seed": 0}:
        raise CheckpointError("format", "checkpoint architecture differs from the target model")
    model.load_state(loaded.state())
    return model, extra


def describe(path) -> dict:
    data = Path(path).read_bytes()
    model, extra = decode(data)
    return {
        "path": str(path),
        "bytes": len(data),
        "version": VERSION,
        "model": model.config.to_dict(),
        "extra": extra,
        "tensors": [(k, list(p.shape)) for k, p in model.named_parameters()],
        "checksum": data[-_DIGEST:].hex(),
    }
