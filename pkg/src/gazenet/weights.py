"""Binary weights file.

Layout (all integers little-endian)::

    b"GZWT"  u32 version (=1)  u32 tensor_count
    per tensor, names sorted:
        u16 name_len  name (UTF-8)  u8 rank  u32 dim * rank  f32 values (row-major)

Nothing may follow the last tensor.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .tensor import ParameterStore, is_buffer_name

MAGIC = b"GZWT"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def _encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"tensor {name} has rank {arr.ndim}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_tensors(tensors: Mapping[str, np.ndarray], path: Union[str, Path]) -> None:
    Path(path).write_bytes(_encode(tensors))


def save_weights(store: ParameterStore, path: Union[str, Path]) -> None:
    """Write all parameters and normalization buffers of ``store``."""
    save_tensors(store.state(), path)


def _decode(data: bytes, source: str) -> Dict[str, np.ndarray]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise WeightsFormatError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise WeightsFormatError(f"{source}: unexpected end of file in header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise WeightsFormatError(f"{source}: unsupported version {version} (expected {VERSION})")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    for i in range(count):
        if pos + 2 > len(data):
            raise WeightsFormatError(f"{source}: unexpected end of file at tensor #{i}")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + nlen + 1 > len(data):
            raise WeightsFormatError(f"{source}: unexpected end of file at tensor #{i}")
        try:
            name = data[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise WeightsFormatError(f"{source}: tensor #{i} name is not valid UTF-8") from None
        pos += nlen
        rank = data[pos]
        pos += 1
        if pos + 4 * rank > len(data):
            raise WeightsFormatError(f"{source}: unexpected end of file at tensor {name}")
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise WeightsFormatError(f"{source}: unexpected end of file at tensor {name}")
        if name in out:
            raise WeightsFormatError(f"{source}: duplicate tensor name {name}")
        out[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise WeightsFormatError(f"{source}: {len(data) - pos} trailing bytes after the last tensor")
    return out


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return _decode(Path(path).read_bytes(), str(path))


def load_weights(path: Union[str, Path]) -> ParameterStore:
    """Read a weights file into a fresh store; normalization statistics become buffers."""
    store = ParameterStore()
    for name, arr in load_tensors(path).items():
        if is_buffer_name(name):
            store.buffers[name] = arr
        else:
            store.add(name, arr)
    return store
