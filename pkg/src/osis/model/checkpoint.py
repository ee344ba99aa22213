"""Versioned binary parameter checkpoints."""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .network import ModelConfig, NetworkParams, param_shapes

CKPT_MAGIC = b"OSISCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["widths"] = tuple(d["widths"])
    return ModelConfig(**d)


def params_to_bytes(params: NetworkParams, meta: dict | None = None) -> bytes:
    header = json.dumps({"model": params.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(header)) + header
    out += struct.pack("<I", len(params.arrays))
    for name, arr in params.arrays.items():
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def params_from_bytes(buf: bytes, expect: ModelConfig | None = None) -> tuple[NetworkParams, dict]:
    if len(buf) < 20 or buf[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (reader version {CKPT_VERSION})")
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != struct.unpack("<I", buf[-4:])[0]:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = 16
    header = json.loads(buf[pos:pos + hlen])
    pos += hlen
    cfg = _config_from_dict(header["model"])
    if expect is not None and expect != cfg:
        raise CheckpointError(f"checkpoint model config {cfg} does not match expected {expect}")
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shapes = param_shapes(cfg)
    arrays = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4:pos + 4 + ln].decode()
        pos += 4 + ln
        (nd,) = struct.unpack_from("<I", buf, pos)
        shape = struct.unpack_from(f"<{nd}Q", buf, pos + 4)
        pos += 4 + 8 * nd
        if name not in shapes or tuple(shape) != shapes[name]:
            raise CheckpointError(f"parameter {name} has shape {tuple(shape)}, "
                                  f"expected {shapes.get(name)}")
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(buf, "<f8", count, pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    params = NetworkParams(cfg, arrays)
    try:
        params.check()
    except ValueError as e:
        raise CheckpointError(str(e)) from e
    return params, header["meta"]


def save_checkpoint(params: NetworkParams, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_bytes(params_to_bytes(params, meta))


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> tuple[NetworkParams, dict]:
    return params_from_bytes(Path(path).read_bytes(), expect)
