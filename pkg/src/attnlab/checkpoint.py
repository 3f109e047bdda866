"""Binary checkpoint container.

Layout (little-endian)::

    b"ATTNLAB1"
    u32 format version
    u32 length of config JSON, then the UTF-8 JSON
    u32 tensor count
    per tensor: u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
                prod(dims) float64 values in row-major order
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigError
from .model import CHECKPOINT_VERSION, Checkpoint, ModelConfig
from .numcore import DTYPE
from .positional import PAIRING

MAGIC = b"ATTNLAB1"


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = {
        "model": ckpt.config.to_dict(),
        "step": ckpt.step,
        "rope_pairing": PAIRING,
        "dtype": "float64",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, t in ckpt.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        buf.write(t.detach().to(DTYPE).contiguous().numpy().astype("<f8", copy=False).tobytes())
    return buf.getvalue()


def loads(data: bytes, source: str = "<bytes>") -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError(f"{source}: not an ATTNLAB1 checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(bytes(take(hlen)).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{source}: bad config block: {exc}") from exc
    if header.get("rope_pairing", PAIRING) != PAIRING:
        raise CheckpointError(f"{source}: rope pairing {header.get('rope_pairing')!r} not supported")
    (count,) = struct.unpack("<I", take(4))
    params = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        params[name] = torch.from_numpy(arr.copy())
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes")
    try:
        return Checkpoint(cfg, params, step=int(header.get("step", 0)), version=version)
    except ConfigError as exc:
        raise CheckpointError(f"{source}: {exc}") from exc


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, dumps(ckpt))


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from exc
    return loads(data, str(path))
