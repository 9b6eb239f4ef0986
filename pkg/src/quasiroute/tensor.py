"""Minimal reverse-mode differentiation over numpy arrays.

Every primitive records its parents and a closure mapping the output gradient
to parent gradients.  ``backward`` walks the graph in reverse topological
order, visiting each node once; gradients of leaf tensors accumulate across
calls until the caller resets them.
"""

from __future__ import annotations

import contextlib
import json
import os
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

DTYPE = np.float64
_GRAD_ENABLED = True
_DTYPE = DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Evaluate forward passes in ``dtype`` (used for extended-precision oracles)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = dtype
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- basics ------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise binary ------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), back)


# -- elementwise unary -------------------------------------------------------
def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),))


# -- reductions and shape ops -------------------------------------------------
def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(count))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (unbroadcast(g, old),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, xs, back)


def getitem(x, idx) -> Tensor:
    """Basic or advanced indexing; the backward scatters with np.add.at so
    repeated indices accumulate."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), back)


def gather_rows(x, rows) -> Tensor:
    """x: (B, N, d), rows: (B,) -> (B, d)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    if x.ndim != 3 or rows.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows expects (B, N, d) and (B,), got {x.shape} and {rows.shape}")
    return getitem(x, (np.arange(x.shape[0]), rows))


# -- softmax and normalization -----------------------------------------------
def _additive_mask(mask, shape) -> np.ndarray:
    m = np.zeros(shape) if mask is None else np.asarray(mask)
    if m.dtype == bool:
        m = np.where(m, 0.0, -np.inf)
    return np.broadcast_to(m, shape)


def masked_softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """Softmax with exact zeros on masked entries.

    ``mask`` is either boolean (True = allowed) or additive offsets where any
    value at or below -1e8 counts as masked.
    """
    x = as_tensor(logits)
    m = _additive_mask(mask, x.shape)
    allowed = m > -1e8
    if not np.all(allowed.any(axis=axis)):
        raise DomainError("masked_softmax row with no allowed entries")
    z = np.where(allowed, x.data + np.where(allowed, m, 0.0), -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(allowed, np.exp(z), 0.0)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), back)


def masked_log_softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """log of masked_softmax; masked entries hold -inf and receive zero gradient."""
    x = as_tensor(logits)
    m = _additive_mask(mask, x.shape)
    allowed = m > -1e8
    if not np.all(allowed.any(axis=axis)):
        raise DomainError("masked_log_softmax row with no allowed entries")
    z = np.where(allowed, x.data + np.where(allowed, m, 0.0), -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.where(allowed, np.exp(z), 0.0).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.where(allowed, np.exp(out), 0.0)

    def back(g):
        g = np.where(allowed, g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), back)


def instance_norm(x, axis: int = -2, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (the node axis)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _result(xhat, (x,), back)


# -- backward ----------------------------------------------------------------
def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    if loss.data.size != 1 and grad is None:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=_DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


Tensor.backward = backward


# -- verification ----------------------------------------------------------
def grad_check(f: Callable[..., Tensor], inputs, h: float = 1e-5, max_entries: Optional[int] = None,
               seed=0, oracle_dtype=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(*inputs)`` must return a scalar Tensor; each input is a leaf Tensor.
    The relative error of an entry is |a - n| / max(|a|, |n|, 1e-8).  With
    ``max_entries`` only a random subset of entries per input is probed.
    ``oracle_dtype`` (e.g. np.longdouble) evaluates the finite differences in
    extended precision; analytic gradients always use the default dtype.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = f(*inputs)
    backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    rng = np.random.default_rng(seed)
    dtype = oracle_dtype or DTYPE
    saved = [x.data for x in inputs]
    worst = 0.0
    try:
        with no_grad(), precision(dtype):
            for x in inputs:
                x.data = x.data.astype(dtype)
            for x, a in zip(inputs, analytic):
                flat = x.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = rng.choice(flat.size, size=max_entries, replace=False)
                for k in idx:
                    orig = flat[k]
                    flat[k] = orig + dtype(h)
                    fp = f(*inputs).data.reshape(-1)[0]
                    flat[k] = orig - dtype(h)
                    fm = f(*inputs).data.reshape(-1)[0]
                    flat[k] = orig
                    num = float((fp - fm) / (2 * dtype(h)))
                    ak = float(a.reshape(-1)[k])
                    err = abs(ak - num) / max(abs(ak), abs(num), 1e-8)
                    worst = max(worst, err)
    finally:
        for x, data in zip(inputs, saved):
            x.data = data
    return worst


# -- checkpoints -------------------------------------------------------------
def save_checkpoint(path: str, arrays: dict, meta: Optional[dict] = None) -> None:
    """Write ``path`` (little-endian float32 blob) and ``path + '.json'`` (manifest)."""
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
            fh.write(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
            offset += a.size * 4
    manifest = {"format": "f32le", "arrays": entries, "meta": meta or {}}
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(path: str) -> tuple[dict, dict]:
    with open(path + ".json") as fh:
        manifest = json.load(fh)
    blob = np.fromfile(path, dtype="<f4")
    out = {}
    for e in manifest["arrays"]:
        start = e["offset"] // 4
        out[e["name"]] = blob[start:start + e["count"]].astype(np.float64).reshape(e["shape"])
    return out, manifest.get("meta", {})


def checkpoint_exists(path: str) -> bool:
    return os.path.exists(path) and os.path.exists(path + ".json")
