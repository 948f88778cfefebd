"""Minimal reverse-mode autodiff over dense numpy arrays.

Operations record themselves on the active :class:`Tape` (if any input
requires a gradient). ``Tape.backward`` walks the records in exact reverse
order and accumulates gradients with ``+=``.

Storage is float32. Tests switch the whole graph to float64 with
:func:`precision` so finite-difference oracles are not swamped by roundoff.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float32)


def _tapes() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


@contextlib.contextmanager
def precision(dtype):
    """Create tensors with ``dtype`` inside the block (float64 for oracles)."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_dtype(), copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        arr.setflags(write=True)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._done = False

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._done:
            raise ContractError("tape already consumed by a previous backward")
        if not loss.requires_grad:
            raise ContractError("loss is not connected to any parameter")
        # Intermediate grads live here; leaf grads go to Tensor.grad.
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(out) for out, _, _ in self.records}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in produced:
                    if id(t) in grads:
                        grads[id(t)] = grads[id(t)] + gi
                    else:
                        grads[id(t)] = gi
                else:
                    gi = gi.astype(t.data.dtype, copy=False)
                    if t.grad is None:
                        t.grad = gi.copy()
                    else:
                        t.grad += gi
        self.records.clear()
        self._done = True


def _active_tape() -> Tape | None:
    tapes = _tapes()
    return tapes[-1] if tapes else None


def _result(arr: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Wrap an op output and record it if any input needs a gradient."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


@contextlib.contextmanager
def no_grad():
    """Suspend recording on every active tape inside the block."""
    saved = list(_tapes())
    _tapes().clear()
    try:
        yield
    finally:
        _tapes().extend(saved)


# --------------------------------------------------------------------------
# shape helpers


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # Exact match, or b matches a's trailing dims (bias over leading batch dims).
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and gives sigmoid(0) == 0.5 exactly.
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1 - y),))


_ELEMENTWISE = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid}


def elementwise(op: str, *inputs) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# --------------------------------------------------------------------------
# linear algebra and reshaping


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading dims of ``a`` are treated as batch."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        a2 = ad.reshape(-1, ad.shape[-1])
        return (g @ bd.T), (a2.T @ g2)

    return _result(ad @ bd, (a, b), backward)


def bmm(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Batched product of ``a[B, m, k]`` with ``b[B, k, n]`` (or ``b[B, n, k]``ᵀ)."""
    ad, bd = a.data, b.data
    if ad.ndim != 3 or bd.ndim != 3 or ad.shape[0] != bd.shape[0]:
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} do not align")
    bt = bd.transpose(0, 2, 1) if transpose_b else bd
    if ad.shape[2] != bt.shape[1]:
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        ga = g @ bt.transpose(0, 2, 1)
        gb = ad.transpose(0, 2, 1) @ g
        if transpose_b:
            gb = gb.transpose(0, 2, 1)
        return ga, gb

    return _result(ad @ bt, (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    arrays = [t.data for t in tensors]
    ax = axis % arrays[0].ndim
    for arr in arrays[1:]:
        if arr.ndim != arrays[0].ndim or any(
            arr.shape[i] != arrays[0].shape[i] for i in range(arr.ndim) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {[x.shape for x in arrays]}")
    bounds = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]
    return _result(np.concatenate(arrays, axis=ax), tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    shape, dt = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dt)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], (a,), backward)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather ``table[ids]``; the gradient scatters back into looked-up rows."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range for table with {V} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), backward)


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), lambda g: (np.full(shape, g, dtype=g.dtype),))


def mean(a: Tensor) -> Tensor:
    return scale(total(a), 1.0 / a.size)


def weighted_sum(terms: Sequence[tuple[float, Tensor]]) -> Tensor:
    """``Σ wᵢ·xᵢ`` over scalars, as one node."""
    ws = [w for w, _ in terms]
    ts = tuple(t for _, t in terms)
    dt = ts[0].data.dtype.type
    value = dt(0)
    for w, t in terms:
        value = value + dt(w) * t.data
    return _result(np.asarray(value, dtype=dt), ts, lambda g: tuple(g * dt(w) for w in ws))


# --------------------------------------------------------------------------
# normalisation and losses


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def _softmax(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (broadcastable bool, True = keep) pushes excluded logits to −∞.
    """
    if x.shape[-1] < 1:
        raise DimensionError("softmax_rows: empty rows")
    _check_finite(x.data, "softmax_rows")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("softmax_rows: a row is fully masked")
    y = _softmax(x.data, mask)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward)


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean of −log softmax(logits)[target] over positions where ``mask`` is True."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    m, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != m:
        raise DimensionError(f"cross_entropy: {m} rows but {targets.shape[0]} targets")
    mask = np.ones(m, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    n = int(mask.sum())
    if n == 0:
        raise ContractError("cross_entropy: every position is masked")
    if targets[mask].min() < 0 or targets[mask].max() >= V:
        raise IndexError("cross_entropy: target id out of range")
    _check_finite(logits.data, "cross_entropy")
    safe = np.where(mask, targets, 0)
    lp = log_softmax(logits.data)
    rows = np.arange(m)
    nll = -lp[rows, safe]
    dt = logits.data.dtype.type
    loss = np.asarray(nll[mask].sum(dtype=dt) / dt(n), dtype=dt)

    def backward(g):
        grad = np.exp(lp)
        grad[rows, safe] -= 1
        grad *= (mask / dt(n)).astype(dt)[:, None]
        return (grad * g,)

    return _result(loss, (logits,), backward)


# --------------------------------------------------------------------------
# fused LSTM over a whole sequence


def _lstm_cell(xw, h_prev, c_prev, W_h, b, W_proj):
    """One LSTM cell update from a precomputed input projection ``xw``."""
    H = c_prev.shape[-1]
    z = xw + h_prev @ W_h + b
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    r = o * tc
    h = r @ W_proj if W_proj is not None else r
    return h, c, (i, f, g, o, tc, r)


def lstm_sequence(x: Tensor, W_x: Tensor, W_h: Tensor, b: Tensor, W_proj: Tensor | None,
                  mask: np.ndarray, h0: np.ndarray | None = None,
                  c0: np.ndarray | None = None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Unroll an LSTM (gate order i, f, g, o) over ``x[B, T, d]`` as one tape node.

    Where ``mask[b, t]`` is False the state is carried over unchanged.
    Returns the per-step outputs ``[B, T, p]`` plus the final (h, c) arrays.
    """
    B, T, d = x.shape
    H4 = W_x.shape[1]
    H = H4 // 4
    P = W_proj.shape[1] if W_proj is not None else H
    if W_x.shape[0] != d or W_h.shape != (P, H4) or b.shape != (H4,):
        raise DimensionError(
            f"lstm: input {x.shape}, W_x {W_x.shape}, W_h {W_h.shape}, b {b.shape}")
    if W_proj is not None and W_proj.shape[0] != H:
        raise DimensionError(f"lstm: W_proj {W_proj.shape} does not fit hidden size {H}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (B, T):
        raise DimensionError(f"lstm: mask {mask.shape} vs input {(B, T)}")
    dt = x.data.dtype
    wproj = W_proj.data if W_proj is not None else None
    xw = (x.data.reshape(B * T, d) @ W_x.data).reshape(B, T, H4)
    h = np.zeros((B, P), dt) if h0 is None else h0
    c = np.zeros((B, H), dt) if c0 is None else c0
    out = np.empty((B, T, P), dt)
    cache = []
    for t in range(T):
        hn, cn, acts = _lstm_cell(xw[:, t], h, c, W_h.data, b.data, wproj)
        m = mask[:, t:t + 1]
        cache.append((h, c, acts))
        h = np.where(m, hn, h)
        c = np.where(m, cn, c)
        out[:, t] = h
    inputs = (x, W_x, W_h, b) + ((W_proj,) if W_proj is not None else ())

    def backward(gout):
        dW_h = np.zeros_like(W_h.data)
        db = np.zeros_like(b.data)
        dW_proj = np.zeros_like(wproj) if wproj is not None else None
        dxw = np.empty((B, T, H4), dt)
        dh = np.zeros((B, P), dt)
        dc = np.zeros((B, H), dt)
        for t in reversed(range(T)):
            h_prev, c_prev, (i, f, g, o, tc, r) = cache[t]
            m = mask[:, t:t + 1]
            dh_t = gout[:, t] + dh
            dh_new = np.where(m, dh_t, 0)
            dc_new = np.where(m, dc, 0)
            if wproj is not None:
                dW_proj += r.T @ dh_new
                dr = dh_new @ wproj.T
            else:
                dr = dh_new
            do = dr * tc
            dcell = dc_new + dr * o * (1 - tc * tc)
            dz = np.concatenate(
                [dcell * g * i * (1 - i), dcell * c_prev * f * (1 - f),
                 dcell * i * (1 - g * g), do * o * (1 - o)], axis=1)
            dW_h += h_prev.T @ dz
            db += dz.sum(axis=0)
            dxw[:, t] = dz
            dh = dz @ W_h.data.T + np.where(m, 0, dh_t)
            dc = dcell * f + np.where(m, 0, dc)
        dxw2 = dxw.reshape(B * T, H4)
        dx = (dxw2 @ W_x.data.T).reshape(B, T, d)
        dW_x = x.data.reshape(B * T, d).T @ dxw2
        grads = (dx, dW_x, dW_h, db)
        return grads + ((dW_proj,) if wproj is not None else ())

    return _result(out, inputs, backward), h, c


# --------------------------------------------------------------------------
# random numbers

_MASK64 = (1 << 64) - 1


class Rng:
    """Seeded generator whose whole state is one unsigned 64-bit integer.

    Each draw advances the state with the SplitMix64 step and seeds a fresh
    numpy PCG64 stream from the output, so saving ``state`` is enough to
    resume the exact sequence of draws.
    """

    ALGORITHM = "splitmix64+pcg64"

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def _next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._next()))

    def spawn(self) -> "Rng":
        return Rng(self._next())

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator().uniform(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def dropout_mask(self, shape, rate: float, dtype=None) -> np.ndarray:
        """Inverted-dropout multiplier: 0 with prob ``rate``, else 1/(1-rate)."""
        dtype = dtype or _dtype()
        keep = self.generator().random(shape) >= rate
        return keep.astype(dtype) / dtype(1 - rate)


def dropout(x: Tensor, rate: float, rng: Rng | None, train: bool = True) -> Tensor:
    if not train or rate == 0:
        return x
    if rng is None:
        raise ContractError("dropout at train time needs an rng")
    m = rng.dropout_mask(x.shape, rate, x.data.dtype.type)
    return _result(x.data * m, (x,), lambda g: (g * m,))


# --------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-6,
                      coords: Sequence[int] | None = None) -> float:
    """Max relative error between ``x.grad`` after backprop and central differences.

    ``f`` rebuilds the scalar loss from current tensor values. Relative error
    uses the denominator ``max(|a|, |b|, 1e-8)``. ``coords`` restricts the
    check to selected flat indices.
    """
    x.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    # Arithmetic stays in the tensor's dtype so extended-precision runs keep their digits.
    dt = x.data.dtype
    analytic = np.zeros(x.size, dt) if x.grad is None else x.grad.reshape(-1).astype(dt)
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    eps = dt.type(eps)
    worst = dt.type(0)
    with no_grad():
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            up = f().data.astype(dt)[()]
            flat[k] = orig - eps
            down = f().data.astype(dt)[()]
            flat[k] = orig
            num = (up - down) / (2 * eps)
            a = analytic[k]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), dt.type(1e-8)))
    return float(worst)
