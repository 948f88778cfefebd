"""Named parameter collections: snapshots, hashing, gradient bookkeeping."""

from __future__ import annotations

import hashlib
from typing import Dict

import numpy as np

from .tensor import Tensor

ParamStore = Dict[str, Tensor]


def snapshot(params: ParamStore) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def restore(params: ParamStore, snap: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data[...] = snap[k]


def zero_grads(params: ParamStore) -> None:
    for p in params.values():
        p.grad = None


def collect_grads(params: ParamStore) -> dict[str, np.ndarray]:
    """Gradient arrays keyed by name; parameters untouched by backward get zeros."""
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def tensor_hash(arr) -> str:
    """SHA-256 over dtype, shape and raw bytes of an array or Tensor."""
    a = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr)
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


def store_hash(params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        v = params[k]
        h.update(k.encode())
        h.update(tensor_hash(v).encode())
    return h.hexdigest()
