"""Reverse-mode differentiation over numpy arrays.

A :class:`Tensor` records the operation that produced it and a closure
mapping the output gradient to one gradient per parent. ``backward`` walks
the recorded graph in reverse topological order; only leaves store
``.grad`` so calling it twice on the same graph accumulates exactly twice.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels

_GRAD_ENABLED = True


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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, op=""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- bookkeeping ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        backward(self, grad)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


DifferentiableValue = Tensor


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op):
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root, grad):
    """Propagate ``grad`` from ``root`` into every reachable leaf."""
    order = []
    seen = set()
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
    grads = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = np.broadcast_to(g, node.shape).astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            # contiguous so reductions downstream never depend on view layout
            pg = np.asarray(unbroadcast(np.asarray(pg), p.shape), order="C")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise arithmetic ------------------------------------------------------

def add(a, b):
    a, b = _lift(a, b), _lift(b, a)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _lift(a, b), _lift(b, a)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _lift(a, b), _lift(b, a)

    def bw(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)
    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _lift(a, b), _lift(b, a)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GeLU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return _make(out, (a,), bw, "gelu")


def sigmoid(a):
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x).astype(a.dtype)
    sig = -np.expm1(-out)  # sigmoid(x) = 1 - exp(-softplus(x))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clip(a, lo, hi):
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def minimum(a, b):
    a, b = _lift(a, b), _lift(b, a)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make(out, (a, b), lambda g: (g * pick_a, g * ~pick_a), "minimum")


def hypot(a, b):
    """sqrt(a^2 + b^2); gradient taken as zero where both are zero."""
    a, b = _lift(a, b), _lift(b, a)
    out = np.hypot(a.data, b.data)
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        scale = np.where(out > 0, g / safe, 0.0)
        return scale * a.data, scale * b.data
    return _make(out, (a, b), bw, "hypot")


def atan2(y, x):
    """Angle in (-pi, pi]; negative zeros in ``y`` are treated as +0."""
    y, x = _lift(y, x), _lift(x, y)
    yd = y.data + 0.0
    out = np.arctan2(yd, x.data)
    r2 = yd * yd + x.data * x.data
    safe = np.where(r2 > 0, r2, 1.0)

    def bw(g):
        scale = np.where(r2 > 0, g / safe, 0.0)
        return scale * x.data, -scale * yd
    return _make(out, (y, x), bw, "atan2")


# -- linear algebra and reductions ---------------------------------------------

def matmul(a, b):
    a, b = _lift(a, b), _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    return _make(out, (a, b), bw, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)
    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)
    return _make(out, (a,), bw, "mean")


def softmax(a, axis=-1):
    ax = _norm_axis(axis, a.ndim)[0]
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)
    return _make(out, (a,), bw, "softmax")


def layer_norm(a, axis=-1, eps=1e-5):
    """Normalize to zero mean and unit (population) variance along ``axis``."""
    ax = _norm_axis(axis, a.ndim)[0]
    mu = a.data.mean(axis=ax, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=ax, keepdims=True)
        gx = (g * xhat).mean(axis=ax, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return _make(xhat, (a,), bw, "layer_norm")


def dropout(a, p, train, rng=None):
    """Inverted dropout; identity when ``train`` is false or ``p`` is 0."""
    if not train or p <= 0:
        return a
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def conv1d(x, w, b=None, padding="same"):
    """Cross-correlation of ``x`` (B, C_in, L) with ``w`` (C_out, C_in, k).

    ``padding="same"`` zero-pads (k-1)//2 on the left and k//2 on the right.
    """
    x, w = _lift(x), _lift(w, x)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1d shape mismatch {x.shape} * {w.shape}")
    k = w.shape[2]
    if padding == "same":
        pl, pr = (k - 1) // 2, k // 2
    else:
        pl = pr = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    L_out = xp.shape[2] - k + 1
    if L_out <= 0:
        raise ValueError("conv1d kernel longer than padded input")
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # B, C, L_out, k
    out = np.einsum("bclk,ock->bol", cols, w.data, optimize=True)
    parents = [x, w]
    if b is not None:
        b = _lift(b, x)
        out = out + b.data[None, :, None]
        parents.append(b)

    def bw(g):
        gw = np.einsum("bol,bclk->ock", g, cols, optimize=True)
        gcols = np.einsum("bol,ock->bclk", g, w.data, optimize=True)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + L_out] += gcols[:, :, :, j]
        gx = gxp[:, :, pl:pl + x.shape[2]]
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2)))
        return res
    return _make(out, parents, bw, "conv1d")


# -- shape manipulation --------------------------------------------------------

def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(items, axis=-1):
    items = [_lift(t) for t in items]
    ax = _norm_axis(axis, items[0].ndim)[0]
    out = np.concatenate([t.data for t in items], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in items])[:-1]

    def bw(g):
        return np.split(g, splits, axis=ax)
    return _make(out, items, bw, "concat")


def reverse(a, axis):
    ax = _norm_axis(axis, a.ndim)[0]
    return _make(np.flip(a.data, ax), (a,), lambda g: (np.flip(g, ax),), "reverse")


def getitem(a, idx):
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return _make(np.array(out, copy=True), (a,), bw, "slice")


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return getitem(a, tuple(idx))


def expand_dims(a, axis):
    return reshape(a, np.expand_dims(a.data, axis).shape)


def linear_scan(a, b, axis=0, reverse=False):
    """Cumulative linear recurrence ``h[s] = a[s] * h[s-1] + b[s]`` along ``axis``.

    ``h`` starts from zero. With ``reverse`` the recurrence runs from the
    end of the axis towards the start.
    """
    a, b = _lift(a, b), _lift(b, a)
    shape = np.broadcast_shapes(a.shape, b.shape)
    ax = _norm_axis(axis, len(shape))[0]
    A = np.moveaxis(np.broadcast_to(a.data, shape), ax, 0)
    Bv = np.moveaxis(np.broadcast_to(b.data, shape), ax, 0)
    H = _kernels.linear_scan(A, Bv, reverse)
    out = np.moveaxis(H, 0, ax)

    def bw(g):
        G = np.moveaxis(g, ax, 0)
        shifted = np.zeros_like(A)
        prev_h = np.zeros_like(H)
        if reverse:
            shifted[1:] = A[:-1]
            prev_h[:-1] = H[1:]
        else:
            shifted[:-1] = A[1:]
            prev_h[1:] = H[:-1]
        lam = _kernels.linear_scan(shifted, G, not reverse)
        ga = np.moveaxis(lam * prev_h, 0, ax)
        gb = np.moveaxis(lam, 0, ax)
        return ga, gb
    return _make(out, (a, b), bw, "linear_scan")


# -- parameters, optimizer, checkpoints -----------------------------------------

class ParameterStore:
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self, dtype=np.float64):
        self.params = {}
        self.dtype = np.dtype(dtype)
        self.step_count = 0
        self._m = {}
        self._v = {}

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_values(self):
        return int(sum(p.size for p in self.params.values()))

    def snapshot(self):
        """Frozen copies of every parameter value."""
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_values(self, values):
        missing = set(self.params) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            v = np.asarray(values[k])
            if v.shape != p.shape:
                raise ValueError(f"{k}: shape {v.shape} != {p.shape}")
            p.data = v.astype(self.dtype)

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.data = p.data.astype(self.dtype)
            p.grad = None
        self._m.clear()
        self._v.clear()
        self.step_count = 0
        return self


def adam_step(store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, skip_missing=False):
    """One bias-corrected Adam update in place."""
    if not skip_missing:
        missing = [n for n, p in store.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"parameter {missing[0]!r} has no gradient")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            continue
        m = store._m.get(name)
        v = store._v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store._m[name] = m
        store._v[name] = v
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return store


@dataclass
class GradCheckReport:
    max_rel_err: float
    failures: list = field(default_factory=list)
    checked: int = 0
    tol: float = 1e-4

    @property
    def passed(self):
        return not self.failures

    def failing_params(self):
        return sorted({f[0] for f in self.failures})


def grad_check(f, params, h=1e-4, tol=1e-4, max_entries=None, rng=None):
    """Compare backprop gradients against central differences.

    ``params`` maps names to leaf tensors (a :class:`ParameterStore` works).
    ``max_entries`` caps the number of probed entries per parameter, chosen
    at random with ``rng``.
    """
    items = list(params.items())
    for _, p in items:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in items}
    worst = 0.0
    failures = []
    checked = 0
    rng = rng if rng is not None else np.random.default_rng(0)
    with no_grad():
        for name, p in items:
            flat = p.data.reshape(-1)
            idxs = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idxs = np.sort(rng.choice(flat.size, max_entries, replace=False))
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = float(analytic[name].reshape(-1)[i])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                checked += 1
                worst = max(worst, err)
                if not err < tol:
                    failures.append((name, np.unravel_index(i, p.shape), ana, num))
    for _, p in items:
        p.grad = None
    return GradCheckReport(worst, failures, checked, tol)


def save_checkpoint(path, store, meta=None):
    """Write ``<path>`` (JSON manifest) and ``<path stem>.bin`` (float32 blob).

    ``store`` is a ParameterStore or a mapping of names to arrays.
    """
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, p in store.items():
            arr = np.ascontiguousarray(p if isinstance(p, np.ndarray) else p.data, dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest = {"format": "dkgcm-checkpoint/1", "precision": "float32",
                "blob": blob_path.name, "parameters": entries, "meta": meta or {}}
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path, blob_path


def load_checkpoint(path):
    """Return ``(values, meta)`` where values maps names to float32 arrays."""
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    blob = np.fromfile(path.parent / manifest["blob"], dtype="<f4")
    values = {}
    for e in manifest["parameters"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = blob[e["offset"]:e["offset"] + n]
        if chunk.size != n:
            raise ValueError(f"checkpoint blob truncated at {e['name']}")
        values[e["name"]] = chunk.reshape(e["shape"]).copy()
    return values, manifest.get("meta", {})


def values_digest(values):
    h = hashlib.sha256()
    for k in sorted(values):
        h.update(k.encode())
        h.update(np.ascontiguousarray(values[k]).tobytes())
    return h.hexdigest()
