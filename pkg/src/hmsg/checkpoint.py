"""Binary checkpoint format.

Layout::

    b"HMSG1\\n"
    u64 length + UTF-8 JSON {"model": ModelConfig, "layout": ModelLayout}
    u32 parameter count
    per parameter: name \\0 comma-separated shape \\0 u64 nbytes + little-endian floats

All integers are little-endian. The JSON is written with sorted keys, so
saving the same model twice produces the same bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .exceptions import ConfigMismatch, CorruptCheckpoint, MissingFile
from .model import HmsgModel, ModelConfig, ModelLayout

MAGIC = b"HMSG1\n"


def _encode(model: HmsgModel) -> bytes:
    header = json.dumps({"model": asdict(model.config), "layout": model.layout.to_dict()}, sort_keys=True)
    blob = header.encode()
    parts = [MAGIC, struct.pack("<Q", len(blob)), blob, struct.pack("<I", len(model.params))]
    little = np.dtype(model.config.dtype).newbyteorder("<")
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype=little).tobytes()
        shape = ",".join(str(s) for s in p.data.shape)
        parts += [name.encode(), b"\0", shape.encode(), b"\0", struct.pack("<Q", len(raw)), raw]
    return b"".join(parts)


def save_checkpoint(path, model: HmsgModel) -> Path:
    path = Path(path)
    path.write_bytes(_encode(model))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptCheckpoint("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def until_nul(self) -> bytes:
        end = self.data.find(b"\0", self.pos)
        if end < 0:
            raise CorruptCheckpoint("checkpoint is truncated")
        out = self.data[self.pos : end]
        self.pos = end + 1
        return out


def read_checkpoint(path) -> tuple[ModelConfig, ModelLayout, dict[str, np.ndarray]]:
    """Decode a checkpoint into its config, layout and parameter arrays."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no checkpoint at {path}")
    r = _Reader(path.read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic, not an HMSG1 checkpoint")
    (n_header,) = struct.unpack("<Q", r.take(8))
    try:
        header = json.loads(r.take(n_header).decode())
        config = ModelConfig.from_dict(header["model"])
        layout = ModelLayout.from_dict(header["layout"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable config header ({exc})") from None
    dtype = np.dtype(config.dtype).newbyteorder("<")
    (n_params,) = struct.unpack("<I", r.take(4))
    state = {}
    for _ in range(n_params):
        name = r.until_nul().decode()
        shape_text = r.until_nul().decode()
        shape = tuple(int(s) for s in shape_text.split(",")) if shape_text else ()
        (nbytes,) = struct.unpack("<Q", r.take(8))
        if nbytes != int(np.prod(shape)) * dtype.itemsize:
            raise CorruptCheckpoint(f"{path}: {name} has {nbytes} bytes, shape {shape} needs more or fewer")
        state[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(config.dtype)
    if r.pos != len(r.data):
        raise CorruptCheckpoint(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return config, layout, state


def _comparable(config: ModelConfig) -> dict:
    d = asdict(config)
    d.pop("seed")
    return d


def load_checkpoint(path, model: HmsgModel | None = None) -> HmsgModel:
    """Load parameters into ``model``, or build a fresh model when none is given.

    The initialisation seed is the only config field allowed to differ.
    """
    config, layout, state = read_checkpoint(path)
    if model is None:
        model = HmsgModel(config, layout)
    else:
        mine, theirs = _comparable(model.config), _comparable(config)
        diff = sorted(k for k in mine if mine[k] != theirs[k])
        if diff:
            detail = ", ".join(f"{k}: checkpoint {theirs[k]!r} vs run {mine[k]!r}" for k in diff)
            raise ConfigMismatch(f"checkpoint config differs ({detail})")
        if model.layout.to_dict() != layout.to_dict():
            raise ConfigMismatch("checkpoint was trained on a different graph layout")
    model.load_state_dict(state)
    return model
