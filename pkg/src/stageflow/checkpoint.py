"""Binary checkpoint container.

Layout (all integers little-endian):

    magic     8 bytes  b"SFLOWCK1"
    version   u32
    kind      u32 length + utf-8 tag
    hyper     u64 length + canonical JSON
    log       u64 length + canonical JSON
    count     u64 tensor count
    tensors   per tensor: u32 name length, utf-8 name,
              u32 rank, u64 extents..., raw float32 payload
    digest    u64 FNV-1a of every byte above

Tensors are written sorted by name, and JSON is emitted with sorted keys,
so save -> load -> save is byte-identical. Writes go through a temp file
plus rename, so a crash never leaves a half-written checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SFLOWCK1"
VERSION = 1

MODEL_KINDS = ("teacher", "flow-module", "meta", "hybrid", "stage-weights")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class CheckpointError(RuntimeError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


class UnknownVersionError(CheckpointError):
    pass


class UnknownModelKindError(CheckpointError):
    pass


def _fnv1a64_py(data, state: int = _FNV_OFFSET) -> int:
    h = state
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


try:  # numba makes hashing ~100x faster; the pure-python path is bit-identical
    from numba import njit as _njit

    @_njit(cache=True)
    def _fnv1a64_arr(arr, state):
        h = state
        prime = np.uint64(_FNV_PRIME)
        for i in range(arr.size):
            h = (h ^ np.uint64(arr[i])) * prime
        return h

    def fnv1a64(data, state: int = _FNV_OFFSET) -> int:
        buf = np.frombuffer(data, dtype=np.uint8)
        return int(_fnv1a64_arr(buf, np.uint64(state)))

except ImportError:  # pragma: no cover - exercised only without numba
    fnv1a64 = _fnv1a64_py


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray]
    hyper: dict = field(default_factory=dict)
    log: dict = field(default_factory=dict)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _encode(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in MODEL_KINDS:
        raise UnknownModelKindError(f"unknown model kind {ckpt.kind!r}")
    parts = [MAGIC, struct.pack("<I", VERSION)]
    kind_b = ckpt.kind.encode("utf-8")
    parts.append(struct.pack("<I", len(kind_b)))
    parts.append(kind_b)
    for blob in (_canonical_json(ckpt.hyper), _canonical_json(ckpt.log)):
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    names = sorted(ckpt.tensors)
    parts.append(struct.pack("<Q", len(names)))
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float32)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def save_checkpoint(ckpt: Checkpoint, path) -> int:
    """Write atomically (temp + rename); returns the file's content digest."""
    data = _encode(ckpt)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return struct.unpack("<Q", data[-8:])[0]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 12:
        raise TruncatedCheckpointError(f"checkpoint too short ({len(raw)} bytes)")
    body, digest_bytes = raw[:-8], raw[-8:]
    stored = struct.unpack("<Q", digest_bytes)[0]
    if fnv1a64(body) != stored:
        raise DigestMismatchError("checkpoint digest mismatch (corrupted or truncated file)")

    rd = _Reader(body)
    if rd.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = rd.u32()
    if version != VERSION:
        raise UnknownVersionError(f"unsupported checkpoint version {version}")
    kind = rd.take(rd.u32()).decode("utf-8")
    if kind not in MODEL_KINDS:
        raise UnknownModelKindError(f"unknown model kind {kind!r}")
    hyper = json.loads(rd.take(rd.u64()).decode("utf-8"))
    log = json.loads(rd.take(rd.u64()).decode("utf-8"))
    count = rd.u64()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        shape = tuple(rd.u64() for _ in range(rank))
        n_items = 1
        for s in shape:
            n_items *= s
        payload = rd.take(4 * n_items)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if rd.pos != len(body):
        raise CheckpointError(f"{len(body) - rd.pos} trailing bytes after tensor table")
    return Checkpoint(kind=kind, tensors=tensors, hyper=hyper, log=log)


def state_digest(state: dict[str, np.ndarray]) -> int:
    """Order-independent-of-insertion digest of a named tensor set."""
    h = _FNV_OFFSET
    for name in sorted(state):
        h = fnv1a64(name.encode("utf-8"), h)
        h = fnv1a64(np.ascontiguousarray(state[name], dtype=np.float32).tobytes(), h)
    return h
