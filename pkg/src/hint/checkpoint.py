"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"HINTCKPT"                       magic, 8 bytes
    u32 version
    u32 n, n bytes                    ModelConfig as compact sorted-key JSON
    u32 count                         number of parameters
    count x {
        u16 n, n bytes                parameter name (UTF-8)
        u8  ndim, ndim x u32          shape
        prod(shape) x f32             values
    }

Writing a loaded checkpoint reproduces the original bytes exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointVersionError, ParseError
from .model import HINT, ModelConfig, build_model

MAGIC = b"HINTCKPT"
VERSION = 1


def encode_checkpoint(cfg: ModelConfig, state: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg_bytes = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    out += struct.pack("<I", len(state))
    for name, value in state.items():
        name_bytes = name.encode("utf-8")
        value = np.asarray(value)
        out += struct.pack("<H", len(name_bytes)) + name_bytes
        out += struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape)
        out += value.astype("<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise ParseError(f"checkpoint truncated while reading {what}", self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(raw: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    r = _Reader(raw)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise ParseError("not a HINT checkpoint (bad magic)", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    (n,) = r.unpack("<I", "config length")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(n, "config").decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"checkpoint config is not valid JSON: {exc}", r.pos) from exc
    (count,) = r.unpack("<I", "parameter count")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(r.take(4 * size, f"{name} values"), dtype="<f4").reshape(shape).copy()
    if r.pos != len(raw):
        raise ParseError(f"{len(raw) - r.pos} trailing bytes after checkpoint", r.pos)
    return cfg, state


def save_checkpoint(model: HINT, path) -> None:
    Path(path).write_bytes(encode_checkpoint(model.cfg, model.state_dict()))


def load_checkpoint(path, dtype=np.float32) -> HINT:
    cfg, state = decode_checkpoint(Path(path).read_bytes())
    model = build_model(cfg, seed=0, dtype=dtype)
    model.load_state_dict(state)
    return model
