"""Binary tensor container shared by checkpoints, adapters, utterances and mels.

Layout (all integers little-endian)::

    b"VTCK" | u32 version | u32 header_len | header (UTF-8 JSON) | pad to 64
    payload: float32 LE tensors, each starting on a 64-byte boundary

The header holds ``{"tensors": [{name, dtype, shape, offset, nbytes}],
"metadata": {...}}`` with offsets relative to the payload start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"VTCK"
VERSION = 1
ALIGN = 64
_PREFIX = struct.Struct("<4sII")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


class ContainerError(ValueError):
    """Base class for unreadable containers."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class CorruptHeaderError(ContainerError):
    pass


class BadOffsetError(ContainerError):
    pass


def fnv1a64(data: bytes, h: int = _FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def fnv1a64_tensors(tensors: Mapping[str, np.ndarray]) -> str:
    """Hex FNV-1a digest over float32 LE bytes of all tensors, in name order."""
    h = _FNV_OFFSET
    for name in sorted(tensors):
        h = fnv1a64(name.encode("utf-8"), h)
        h = fnv1a64(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes(), h)
    return f"{h:016x}"


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def to_bytes(tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append(
            {"name": name, "dtype": "f32", "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)}
        )
        pad = _align(len(raw)) - len(raw)
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = json.dumps(
        {"tensors": table, "metadata": dict(metadata or {})}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    prefix = _PREFIX.pack(MAGIC, VERSION, len(header))
    head = prefix + header
    head += b"\0" * (_align(len(head)) - len(head))
    return head + b"".join(chunks)


def from_bytes(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < _PREFIX.size:
        raise BadMagicError("file too short to be a VTCK container")
    magic, version, header_len = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    end = _PREFIX.size + header_len
    if end > len(buf):
        raise CorruptHeaderError("header length exceeds file size")
    try:
        header = json.loads(buf[_PREFIX.size:end].decode("utf-8"))
        table = header["tensors"]
        metadata = header["metadata"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"unreadable header: {exc}") from exc
    payload = memoryview(buf)[_align(end):]

    tensors: dict[str, np.ndarray] = {}
    spans = []
    for entry in table:
        name, shape = entry["name"], tuple(entry["shape"])
        off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if entry.get("dtype") != "f32":
            raise CorruptHeaderError(f"tensor {name!r} has unsupported dtype {entry.get('dtype')!r}")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise BadOffsetError(f"tensor {name!r}: byte count does not match shape {shape}")
        if off < 0 or off % ALIGN or off + nbytes > len(payload):
            raise BadOffsetError(f"tensor {name!r}: offset {off} outside payload bounds")
        spans.append((off, off + nbytes, name))
        arr = np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    spans.sort()
    for (_, end_a, a), (start_b, _, b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise BadOffsetError(f"tensors {a!r} and {b!r} overlap")
    return tensors, metadata


def save(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    Path(path).write_bytes(to_bytes(tensors, metadata))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return from_bytes(Path(path).read_bytes())
