"""Binary checkpoint format.

Layout (little-endian)::

    b"S2SP" | u32 version | u64 tensor count |
    per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims[rank], f32 data

Non-tensor state rides along as tensors: ``meta.*`` entries hold unsigned
64-bit integers as four exact 16-bit limbs, ``optim.m.*``/``optim.v.*`` hold
Adam moments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"S2SP"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int = 0
    rng_state: int | None = None
    adam_step: int | None = None
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION


def _u64_limbs(x: int) -> np.ndarray:
    return np.array([(x >> (16 * k)) & 0xFFFF for k in range(4)], dtype=np.float32)


def _limbs_u64(a: np.ndarray) -> int:
    return sum(int(v) << (16 * k) for k, v in enumerate(a))


def _entries(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = list(ck.tensors.items())
    out.append(("meta.step", _u64_limbs(ck.step)))
    if ck.rng_state is not None:
        out.append(("meta.rng_state", _u64_limbs(ck.rng_state)))
    if ck.adam_step is not None:
        out.append(("meta.adam_step", _u64_limbs(ck.adam_step)))
    out += [(f"optim.m.{k}", v) for k, v in ck.adam_m.items()]
    out += [(f"optim.v.{k}", v) for k, v in ck.adam_v.items()]
    return out


def to_bytes(ck: Checkpoint) -> bytes:
    entries = _entries(ck)
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    parts = [MAGIC, struct.pack("<IQ", ck.version, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4").copy(order="C")  # ascontiguousarray would promote rank 0
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CorruptCheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CorruptCheckpointError("bad magic; not an S2SP checkpoint")
    version, count = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {VERSION}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpointError("tensor name is not UTF-8") from e
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        if name in tensors:
            raise CorruptCheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = data
    if pos != len(view):
        raise CorruptCheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    ck = Checkpoint({}, version=version)
    for name, arr in tensors.items():
        if name == "meta.step":
            ck.step = _limbs_u64(arr)
        elif name == "meta.rng_state":
            ck.rng_state = _limbs_u64(arr)
        elif name == "meta.adam_step":
            ck.adam_step = _limbs_u64(arr)
        elif name.startswith("optim.m."):
            ck.adam_m[name[len("optim.m."):]] = arr
        elif name.startswith("optim.v."):
            ck.adam_v[name[len("optim.v."):]] = arr
        else:
            ck.tensors[name] = arr
    return ck


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
