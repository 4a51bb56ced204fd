"""Binary checkpoint format.

Layout (little-endian)::

    b"DFCK" | u32 version
    u32 len | config text (utf-8, canonical key = value lines)
    u32 len | metadata JSON (utf-8)
    u64 global step
    u8 has_scale | f64 latent scale
    u32 tensor count
    per tensor: u16 name len | name | u8 ndim | u32 dims... | f32 payload
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .config import RunConfig, parse_config, to_text
from .errors import DataFormatError

MAGIC = b"DFCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    latent_scale: Optional[float] = None
    meta: dict[str, Any] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        head = prefix + "/"
        return {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for blob in (to_text(ckpt.config).encode(), json.dumps(ckpt.meta, sort_keys=True).encode()):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    buf.write(struct.pack("<Q", ckpt.step))
    has_scale = ckpt.latent_scale is not None
    buf.write(struct.pack("<Bd", int(has_scale), ckpt.latent_scale if has_scale else 0.0))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataFormatError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def loads(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, source)
    magic = r.take(4)
    if magic != MAGIC:
        raise DataFormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r} (not a checkpoint?)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise DataFormatError(f"{source}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    text = r.take(n).decode()
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode())
    (step,) = r.unpack("<Q")
    has_scale, scale = r.unpack("<Bd")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).copy()
    if r.pos != len(raw):
        raise DataFormatError(f"{source}: {len(raw) - r.pos} trailing bytes after checkpoint")
    config = parse_config(text, env={})
    return Checkpoint(config, tensors, step, scale if has_scale else None, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return loads(path.read_bytes(), str(path))
