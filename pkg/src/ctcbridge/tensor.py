"""Dense tensors with a recorded-operation reverse-mode gradient tape.

Storage is 32-bit, row-major, contiguous.  Reductions (matmul, logsumexp,
normalisation statistics) accumulate in 64-bit before rounding back, which
keeps log-space dynamic programs stable without doubling memory.  Every
public op checks its output for NaN/Inf and raises `NonFiniteError`
instead of letting them escape; log-space code uses `LOG_ZERO` (a finite
sentinel) where a true -inf would otherwise appear.

Ops are pure -- inputs are never mutated -- so untaped tensors are safe to
share across threads.  A `GradTape` and the `Parameter`s watched on it are
confined to a single training thread: run the forward pass with taped
inputs, call `tape.backward(loss)` once, and gradients accumulate into
`Parameter.grad`.

`precision(np.float64)` temporarily switches the storage dtype.  The
finite-difference checker runs under it so its tolerances measure
algorithmic agreement rather than float32 rounding noise.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

LOG_ZERO = -1.0e30  # finite stand-in for log(0); exp() underflows to 0.0

_DTYPE = np.float32


def _dtype():
    return _DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype (not thread-safe; test/check use)."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = dtype
    try:
        yield
    finally:
        _DTYPE = old


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf; the computation has left the finite contract."""


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} produced non-finite values")
    return arr


class Tensor:
    """Immutable dense array, optionally recorded on a gradient tape."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape: Optional["GradTape"] = None, nid: int = -1):
        arr = np.asarray(data, dtype=_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        _finite(arr, "tensor construction")
        self.data = arr
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a one-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        taped = "" if self.tape is None else f", node={self.nid}"
        return f"Tensor(shape={self.data.shape}{taped})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter:
    """Trainable value plus its gradient accumulator."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, value, name: str = "", trainable: bool = True):
        arr = np.ascontiguousarray(np.asarray(value, dtype=_DTYPE))
        _finite(arr, f"parameter {name!r}")
        self.value = arr
        self.grad = np.zeros_like(arr)
        self.name = name
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class GradTape:
    """Ordered record of ops; backward replays it in reverse exactly once."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._backward: list[Optional[Callable]] = []
        self._leaves: dict[int, int] = {}  # id(Parameter) -> node id
        self._leaf_params: dict[int, Parameter] = {}  # node id -> Parameter
        self._consumed = False

    def _record(self, parents: tuple[int, ...], backward) -> int:
        nid = len(self._parents)
        self._parents.append(parents)
        self._backward.append(backward)
        return nid

    def watch(self, p: Parameter) -> Tensor:
        """Leaf tensor for `p`; gradients flow into `p.grad` on backward."""
        key = id(p)
        nid = self._leaves.get(key)
        if nid is None:
            nid = self._record((), None)
            self._leaves[key] = nid
            self._leaf_params[nid] = p
        return Tensor(p.value, self, nid)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; record a new one")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        self._consumed = True

        n = len(self._parents)
        needed = bytearray(n)
        stack = [loss.nid]
        needed[loss.nid] = 1
        while stack:
            for p in self._parents[stack.pop()]:
                if not needed[p]:
                    needed[p] = 1
                    stack.append(p)

        grads: list[Optional[np.ndarray]] = [None] * n
        grads[loss.nid] = np.ones_like(loss.data)
        for i in range(loss.nid, -1, -1):
            if not needed[i] or grads[i] is None:
                continue
            bwd = self._backward[i]
            if bwd is None:
                continue
            for pid, g in zip(self._parents[i], bwd(grads[i])):
                if g is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = g
                else:
                    grads[pid] = grads[pid] + g
        for nid, p in self._leaf_params.items():
            if p.trainable and grads[nid] is not None:
                p.grad += grads[nid].astype(p.grad.dtype, copy=False)


def _emit(tape: Optional[GradTape], data, parents, backward) -> Tensor:
    out = np.asarray(data, dtype=_DTYPE)
    if not out.flags.c_contiguous:
        out = np.ascontiguousarray(out)
    _finite(out, "op")
    if tape is None:
        return Tensor(out)
    return Tensor(out, tape, tape._record(parents, backward))


def _tape_of(*tensors) -> Optional[GradTape]:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands were recorded on different tapes")
    return tape


def _f64(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64, copy=False)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b) -> Tensor:
    """a + b for equal shapes, a python scalar, or a [C] row bias on [N, C]."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        t = a.tape
        return _emit(t, a.data + _DTYPE(b), (a.nid,), lambda g: (g,)) if t else Tensor(a.data + _DTYPE(b))
    b = as_tensor(b)
    tape = _tape_of(a, b)
    pa = a.nid if a.tape is not None else None
    pb = b.nid if b.tape is not None else None
    if a.shape == b.shape:
        def bwd(g):
            return (g if pa is not None else None, g if pb is not None else None)
        out = a.data + b.data
    elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def bwd(g):
            gb = g.sum(axis=0, dtype=np.float64).astype(g.dtype) if pb is not None else None
            return (g if pa is not None else None, gb)
        out = a.data + b.data[None, :]
    else:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    parents = tuple(p for p in (pa, pb) if p is not None)
    if not parents:
        return Tensor(out)

    def full_bwd(g):
        ga, gb = bwd(g)
        res = []
        if pa is not None:
            res.append(ga)
        if pb is not None:
            res.append(gb)
        return tuple(res)

    return _emit(tape, out, parents, full_bwd)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.tape is None:
        return Tensor(-a.data)
    return _emit(a.tape, -a.data, (a.nid,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be a python scalar."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = _DTYPE(b)
        if a.tape is None:
            return Tensor(a.data * s)
        return _emit(a.tape, a.data * s, (a.nid,), lambda g: (g * s,))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(a.data * b.data)
    pa = a.nid if a.tape is not None else None
    pb = b.nid if b.tape is not None else None
    ad, bd = a.data, b.data

    def bwd(g):
        res = []
        if pa is not None:
            res.append(g * bd)
        if pb is not None:
            res.append(g * ad)
        return tuple(res)

    return _emit(tape, ad * bd, tuple(p for p in (pa, pb) if p is not None), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul needs [n,k]@[k,m], got {a.shape} @ {b.shape}")
    tape = _tape_of(a, b)
    out = _f64(a.data) @ _f64(b.data)
    if tape is None:
        return Tensor(out)
    pa = a.nid if a.tape is not None else None
    pb = b.nid if b.tape is not None else None
    ad, bd = a.data, b.data

    def bwd(g):
        g64 = _f64(g)
        res = []
        if pa is not None:
            res.append((g64 @ _f64(bd).T).astype(g.dtype))
        if pb is not None:
            res.append((_f64(ad).T @ g64).astype(g.dtype))
        return tuple(res)

    return _emit(tape, out, tuple(p for p in (pa, pb) if p is not None), bwd)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    if a.tape is None:
        return Tensor(a.data.T)
    return _emit(a.tape, a.data.T, (a.nid,), lambda g: (np.ascontiguousarray(g.T),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0)
    if a.tape is None:
        return Tensor(out)
    return _emit(a.tape, out, (a.nid,), lambda g: (g * mask,))


def dropout(a: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout; identity when rate == 0.  `rng` is a CounterRng."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return a
    a = as_tensor(a)
    keep = (rng.uniforms(a.size).reshape(a.shape) >= rate).astype(a.data.dtype)
    mask = keep / _DTYPE(1.0 - rate)
    out = a.data * mask
    if a.tape is None:
        return Tensor(out)
    return _emit(a.tape, out, (a.nid,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# indexing / shaping


def gather_rows(m: Tensor, ids) -> Tensor:
    """Row lookup m[ids]; the embedding-table read."""
    m = as_tensor(m)
    idx = np.asarray(ids, dtype=np.intp)
    if m.ndim != 2 or idx.ndim != 1:
        raise ValueError("gather_rows expects a 2-D table and 1-D indices")
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[0]):
        raise ValueError("gather_rows index out of range")
    out = m.data[idx]
    if m.tape is None:
        return Tensor(out)
    shape = m.shape

    def bwd(g):
        buf = np.zeros(shape, dtype=g.dtype)
        np.add.at(buf, idx, g)
        return (buf,)

    return _emit(m.tape, out, (m.nid,), bwd)


def gather_flat(x: Tensor, ids) -> Tensor:
    """1-D gather from the row-major flattening of `x`."""
    x = as_tensor(x)
    idx = np.asarray(ids, dtype=np.intp)
    flat = x.data.reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise ValueError("gather_flat index out of range")
    out = flat[idx]
    if x.tape is None:
        return Tensor(out)
    shape = x.shape

    def bwd(g):
        buf = np.zeros(int(np.prod(shape)), dtype=g.dtype)
        np.add.at(buf, idx, g)
        return (buf.reshape(shape),)

    return _emit(x.tape, out, (x.nid,), bwd)


def slice_rows(m: Tensor, start: int, stop: int) -> Tensor:
    m = as_tensor(m)
    if not (0 <= start <= stop <= m.shape[0]):
        raise ValueError(f"slice_rows [{start}:{stop}] out of range for {m.shape}")
    out = m.data[start:stop].copy()
    if m.tape is None:
        return Tensor(out)
    shape = m.shape

    def bwd(g):
        buf = np.zeros(shape, dtype=g.dtype)
        buf[start:stop] = g
        return (buf,)

    return _emit(m.tape, out, (m.nid,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D blocks (equal column count) along rows."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows needs at least one part")
    cols = parts[0].shape[-1]
    for p in parts:
        if p.ndim != 2 or p.shape[1] != cols:
            raise ValueError("concat_rows parts must be 2-D with equal columns")
    tape = _tape_of(*parts)
    out = np.concatenate([p.data for p in parts], axis=0)
    if tape is None:
        return Tensor(out)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])
    taped = [(i, p.nid) for i, p in enumerate(parts) if p.tape is not None]

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i, _ in taped)

    return _emit(tape, out, tuple(nid for _, nid in taped), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    if x.tape is None:
        return Tensor(out)
    old = x.shape
    return _emit(x.tape, out, (x.nid,), lambda g: (g.reshape(old),))


def shift(v: Tensor, k: int, fill: float = LOG_ZERO) -> Tensor:
    """1-D shift right by `k`, filling vacated slots with `fill`."""
    v = as_tensor(v)
    if v.ndim != 1 or k < 0:
        raise ValueError("shift expects a 1-D tensor and k >= 0")
    n = v.shape[0]
    if k == 0:
        return v
    out = np.full(n, fill, dtype=v.data.dtype)
    if k < n:
        out[k:] = v.data[:n - k]
    if v.tape is None:
        return Tensor(out)

    def bwd(g):
        buf = np.zeros(n, dtype=g.dtype)
        if k < n:
            buf[:n - k] = g[k:]
        return (buf,)

    return _emit(v.tape, out, (v.nid,), bwd)


def scale_rows(m: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of `m` by scalar w[i]."""
    m, w = as_tensor(m), as_tensor(w)
    if m.ndim != 2 or w.ndim != 1 or m.shape[0] != w.shape[0]:
        raise ValueError(f"scale_rows mismatch: {m.shape} vs {w.shape}")
    tape = _tape_of(m, w)
    out = m.data * w.data[:, None]
    if tape is None:
        return Tensor(out)
    pm = m.nid if m.tape is not None else None
    pw = w.nid if w.tape is not None else None
    md, wd = m.data, w.data

    def bwd(g):
        res = []
        if pm is not None:
            res.append(g * wd[:, None])
        if pw is not None:
            res.append((g * md).sum(axis=1, dtype=np.float64).astype(g.dtype))
        return tuple(res)

    return _emit(tape, out, tuple(p for p in (pm, pw) if p is not None), bwd)


def sum_groups(m: Tensor, k: int) -> Tensor:
    """[n*k, c] -> [n, c], summing each consecutive group of k rows."""
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] % k != 0:
        raise ValueError("sum_groups needs row count divisible by k")
    n = m.shape[0] // k
    out = _f64(m.data).reshape(n, k, m.shape[1]).sum(axis=1)
    if m.tape is None:
        return Tensor(out)
    return _emit(m.tape, out, (m.nid,), lambda g: (np.repeat(g, k, axis=0),))


# ---------------------------------------------------------------------------
# normalisation / log-space


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ValueError("layer_norm expects [n, c] input with [c] gain/bias")
    tape = _tape_of(x, gain, bias)
    xd = _f64(x.data)
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * _f64(gain.data) + _f64(bias.data)
    if tape is None:
        return Tensor(out)
    px = x.nid if x.tape is not None else None
    pg = gain.nid if gain.tape is not None else None
    pb = bias.nid if bias.tape is not None else None
    gd = _f64(gain.data)

    def bwd(g):
        g64 = _f64(g)
        res = []
        if px is not None:
            dxhat = g64 * gd
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            res.append((inv * (dxhat - m1 - xhat * m2)).astype(g.dtype))
        if pg is not None:
            res.append((g64 * xhat).sum(axis=0).astype(g.dtype))
        if pb is not None:
            res.append(g64.sum(axis=0).astype(g.dtype))
        return tuple(res)

    return _emit(tape, out, tuple(p for p in (px, pg, pb) if p is not None), bwd)


def softmax(x: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax over `axis`: exp((x - max)/tau) / sum."""
    if tau <= 0:
        raise ValueError("softmax temperature must be > 0")
    x = as_tensor(x)
    xd = _f64(x.data)
    z = (xd - xd.max(axis=axis, keepdims=True)) / tau
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    if x.tape is None:
        return Tensor(s)

    def bwd(g):
        g64 = _f64(g)
        dot = (g64 * s).sum(axis=axis, keepdims=True)
        return ((s * (g64 - dot) / tau).astype(g.dtype),)

    return _emit(x.tape, s, (x.nid,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = _f64(x.data)
    m = xd.max(axis=axis, keepdims=True)
    z = xd - m
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    if x.tape is None:
        return Tensor(ls)
    p = np.exp(ls)

    def bwd(g):
        g64 = _f64(g)
        return ((g64 - p * g64.sum(axis=axis, keepdims=True)).astype(g.dtype),)

    return _emit(x.tape, ls, (x.nid,), bwd)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) over the last axis; 1-D input reduces to a scalar."""
    x = as_tensor(x)
    xd = _f64(x.data)
    m = xd.max(axis=axis, keepdims=True)
    out = (m + np.log(np.exp(xd - m).sum(axis=axis, keepdims=True))).squeeze(axis)
    if x.tape is None:
        return Tensor(out)
    w = np.exp(xd - np.expand_dims(out, axis))

    def bwd(g):
        return ((np.expand_dims(_f64(g), axis) * w).astype(g.dtype),)

    return _emit(x.tape, out, (x.nid,), bwd)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise log(exp(a) + exp(b)), stable against LOG_ZERO operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"logaddexp shape mismatch: {a.shape} vs {b.shape}")
    tape = _tape_of(a, b)
    out = np.logaddexp(_f64(a.data), _f64(b.data))
    if tape is None:
        return Tensor(out)
    pa = a.nid if a.tape is not None else None
    pb = b.nid if b.tape is not None else None
    wa = np.exp(_f64(a.data) - out)
    wb = np.exp(_f64(b.data) - out)

    def bwd(g):
        res = []
        if pa is not None:
            res.append((_f64(g) * wa).astype(g.dtype))
        if pb is not None:
            res.append((_f64(g) * wb).astype(g.dtype))
        return tuple(res)

    return _emit(tape, out, tuple(p for p in (pa, pb) if p is not None), bwd)


# ---------------------------------------------------------------------------
# losses / reductions


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean NLL of `targets` under softmax(logits) rows, optionally masked.

    Gradient at an active row is (softmax(row) - onehot) / active_count.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects [n, c] logits")
    tgt = np.asarray(targets, dtype=np.intp)
    n, c = logits.shape
    if tgt.shape != (n,):
        raise ValueError("targets must be 1-D, one per row")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= c):
        raise ValueError("target id out of range")
    m = np.ones(n, dtype=np.float64) if mask is None else _f64(np.asarray(mask))
    active = m.sum()
    if active <= 0:
        raise ValueError("cross_entropy mask selects no positions")
    xd = _f64(logits.data)
    mx = xd.max(axis=1, keepdims=True)
    z = xd - mx
    ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(ls[np.arange(n), tgt] * m).sum() / active
    if logits.tape is None:
        return Tensor(loss)
    p = np.exp(ls)

    def bwd(g):
        d = p.copy()
        d[np.arange(n), tgt] -= 1.0
        d *= (m / active)[:, None]
        return ((d * _f64(g)).astype(g.dtype),)

    return _emit(logits.tape, loss, (logits.nid,), bwd)


def reduce_sum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _f64(x.data).sum()
    if x.tape is None:
        return Tensor(out)
    shape = x.shape
    return _emit(x.tape, out, (x.nid,), lambda g: (np.full(shape, g, dtype=g.dtype),))


def reduce_mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.size
    out = _f64(x.data).sum() / n
    if x.tape is None:
        return Tensor(out)
    shape = x.shape
    return _emit(x.tape, out, (x.nid,), lambda g: (np.full(shape, g / n, dtype=g.dtype),))


# ---------------------------------------------------------------------------
# checking


def finite_diff_check(f, x, h: float = 1e-4) -> float:
    """Max relative disagreement between taped gradients and central differences.

    `f` maps a Tensor to a scalar Tensor and must be deterministic.  Runs
    under float64 so the report reflects the backward rule, not float32
    rounding.  Returns max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-8).
    """
    if not (1e-6 <= h <= 1e-2):
        raise ValueError("h must lie in [1e-6, 1e-2]")
    with precision(np.float64):
        p = Parameter(np.asarray(x, dtype=np.float64), name="fd_check")
        tape = GradTape()
        out = f(tape.watch(p))
        tape.backward(out)
        analytic = p.grad.reshape(-1).copy()
        flat = p.value.reshape(-1)
        numeric = np.zeros_like(analytic)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(p.value)).item()
            flat[i] = orig - h
            fm = f(Tensor(p.value)).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        rel = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    return float(rel.max()) if rel.size else 0.0


def causal_mask(n: int) -> Tensor:
    """[n, n] additive mask: 0 at or below the diagonal, LOG_ZERO above."""
    m = np.zeros((n, n), dtype=_DTYPE)
    m[np.triu_indices(n, k=1)] = LOG_ZERO
    return Tensor(m)
