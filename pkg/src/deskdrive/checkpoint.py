"""Versioned binary parameter checkpoints.

Layout (little-endian)::

    b"DDCK" | u16 version | u16 len + kind (utf-8)
    u16 n_dims | n_dims x (u16 len + name, u32 value)
    u64 n_params | n_params x f64

Parameters are the module's ``state_dict`` tensors flattened in order.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"DDCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _kind(module: nn.Module) -> str:
    return type(module).__name__


def flat_params(module: nn.Module) -> np.ndarray:
    return np.concatenate([t.detach().reshape(-1).numpy().astype("<f8") for t in module.state_dict().values()])


def params_hash(module: nn.Module) -> str:
    return hashlib.sha256(to_bytes(module)).hexdigest()


def to_bytes(module: nn.Module) -> bytes:
    buf = io.BytesIO()
    kind = _kind(module).encode()
    buf.write(MAGIC + struct.pack("<HH", VERSION, len(kind)) + kind)
    dims = sorted(module.dims.items())
    buf.write(struct.pack("<H", len(dims)))
    for name, value in dims:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<I", int(value)))
    flat = flat_params(module)
    buf.write(struct.pack("<Q", flat.size))
    buf.write(flat.astype("<f8").tobytes())
    return buf.getvalue()


def read_header(data: bytes) -> tuple[str, dict, int, int]:
    """``(kind, dims, n_params, data_offset)``."""
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, klen = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 8
    kind = data[off:off + klen].decode()
    off += klen
    (nd,) = struct.unpack_from("<H", data, off)
    off += 2
    dims = {}
    for _ in range(nd):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode()
        off += ln
        (dims[name],) = struct.unpack_from("<I", data, off)
        off += 4
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    return kind, dims, n, off


def load_into(module: nn.Module, data: bytes) -> nn.Module:
    """Fill ``module`` in place; kind and every dimension must match."""
    kind, dims, n, off = read_header(data)
    if kind != _kind(module):
        raise CheckpointError(f"checkpoint holds {kind}, expected {_kind(module)}")
    if dims != {k: int(v) for k, v in module.dims.items()}:
        raise CheckpointError(f"dimension mismatch: file {dims} vs model {module.dims}")
    flat = np.frombuffer(data, dtype="<f8", count=n, offset=off)
    state = module.state_dict()
    total = sum(t.numel() for t in state.values())
    if total != n:
        raise CheckpointError(f"parameter count mismatch: file {n} vs model {total}")
    i = 0
    new = {}
    for name, t in state.items():
        new[name] = torch.from_numpy(flat[i:i + t.numel()].copy()).reshape(t.shape).to(t.dtype)
        i += t.numel()
    module.load_state_dict(new)
    return module


def save(module: nn.Module, path: str | Path) -> str:
    data = to_bytes(module)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(cls, path: str | Path) -> nn.Module:
    """Construct ``cls`` from the header dims and load its parameters."""
    data = Path(path).read_bytes()
    kind, dims, _, _ = read_header(data)
    if kind != cls.__name__:
        raise CheckpointError(f"checkpoint holds {kind}, expected {cls.__name__}")
    return load_into(cls(**dims), data)
