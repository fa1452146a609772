"""Minimal reverse-mode autodiff on numpy arrays.

A ``Tensor`` wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into every tensor with ``requires_grad``.
All acceptance-grade computation runs in float64; float32 is supported as
a training speed mode but is never used by the verification suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class Tensor:
    """An ndarray plus the backward rule that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """Same values, no gradient flow. Realizes the stop-gradient contract."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar root."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # graph edges are one-shot; free them so memory is reclaimed
            node._parents = ()
            node._backward = None

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def _toposort(root):
    """Iterative postorder over the graph, returned in reverse (root first)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents, backward_fn):
    req = _needs_grad(*parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward=backward_fn if req else None)


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def scale(a, c):
    """Multiply by a python scalar (no gradient for the scalar)."""
    a = _as_tensor(a)
    c = float(c)
    out_data = a.data * c

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _make(out_data, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def powc(a, p):
    """Elementwise power with a constant exponent."""
    a = _as_tensor(a)
    p = float(p)
    out_data = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a):
    """Gaussian error linear unit (tanh form)."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
            a._accumulate(g * da)

    return _make(out_data, (a,), backward)


def detach(a):
    """Forward the value, sever gradient flow."""
    return _as_tensor(a).detach()


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)
    in_shape = a.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(in_shape))

    return _make(out_data, (a,), backward)


def swapaxes(a, ax1, ax2):
    a = _as_tensor(a)
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, ax1, ax2))

    return _make(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + size)
                t._accumulate(g[tuple(idx)])
            start += size

    return _make(out_data, tuple(tensors), backward)


def index_select(a, axis, indices):
    """Gather slices along ``axis``; scatter-adds on the way back."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out_data = np.take(a.data, idx, axis=axis)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            if axis == 0:
                np.add.at(full, idx, g)
            else:
                moved = np.moveaxis(full, axis, 0)
                np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            a._accumulate(full)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and contractions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


def dot(a, b):
    """Inner product of two 1-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot requires equal 1-D shapes, got {a.shape} and {b.shape}")
    out_data = np.asarray(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# normalization / probability ops
# ---------------------------------------------------------------------------

def softmax(a, axis=-1):
    """Stable softmax: max-subtraction before exponentiation."""
    a = _as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - inner))

    return _make(out_data, (a,), backward)


def logsumexp(a, axis=-1, keepdims=False):
    a = _as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError("logsumexp over an empty axis")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_keep = np.log(s) + m
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    soft = e / s

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(gg * soft)

    return _make(out_data, (a,), backward)


LAYER_NORM_EPS = 1e-12


def layer_norm(a, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize over the last axis, then apply gain and bias."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gain.data
            t1 = dxhat.mean(axis=-1, keepdims=True)
            t2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (dxhat - t1 - xhat * t2))

    return _make(out_data, (a, gain, bias), backward)


def embedding_lookup(table, ids):
    """Rows of ``table`` selected by an integer array of any shape."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")
    out_data = table.data[idx]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(full)

    return _make(out_data, (table,), backward)


def cross_entropy(logits, target_ids):
    """Mean negative log-softmax of the target class, over rows."""
    logits = _as_tensor(logits)
    targets = np.asarray(target_ids, dtype=np.intp)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {n}")
    if n == 0:
        return Tensor(np.asarray(0.0, dtype=logits.dtype))
    if targets.min() < 0 or targets.max() >= v:
        raise ShapeError(f"target id out of range [0, {v})")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    s = e.sum(axis=1, keepdims=True)
    lse = np.log(s)[:, 0] + m[:, 0]
    picked = logits.data[np.arange(n), targets]
    out_data = np.asarray((lse - picked).mean())
    soft = e / s

    def backward(g):
        if logits.requires_grad:
            gl = soft.copy()
            gl[np.arange(n), targets] -= 1.0
            logits._accumulate(g * gl / n)

    return _make(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# parameter storage and gradient checking
# ---------------------------------------------------------------------------

class ParamStore:
    """Named map of trainable tensors with matching gradient buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name, array):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(array), requires_grad=True)
        self._params[name] = t
        return t

    def alias(self, name, tensor):
        """Register an existing tensor under a second name (weight sharing)."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        self._params[name] = tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def unique_items(self):
        """(name, tensor) pairs with aliases collapsed to first occurrence."""
        seen = set()
        out = []
        for name, t in self._params.items():
            if id(t) in seen:
                continue
            seen.add(id(t))
            out.append((name, t))
        return out

    def zero_grad(self):
        for _, t in self._params.items():
            t.grad = None

    def arrays(self):
        """Live ndarray views, aliases collapsed."""
        return {name: t.data for name, t in self.unique_items()}


@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    passed: bool
    entries: list[GradCheckEntry] = field(default_factory=list)

    def worst(self, n=5):
        return sorted(self.entries, key=lambda e: -e.rel_err)[:n]


def grad_check(loss_fn, params, epsilon=1e-5, tolerance=1e-6,
               coords_per_param=3, seed=0):
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be a deterministic scalar-valued closure over ``params``.
    Any stop-gradient quantities inside it (e.g. a detached bias) must be
    frozen by the caller before entry, otherwise finite differences see a
    different function than backprop did.

    Relative error uses a unit floor: |a - n| / max(|a|, |n|, 1).
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    for name, t in params.unique_items():
        if t.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params, {name} is {t.dtype}")

    params.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss {loss.data} in grad_check")
    loss.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in params.unique_items()}

    rng = np.random.default_rng(seed)
    entries = []
    for name, t in params.unique_items():
        flat = t.data.reshape(-1)
        n_coords = min(coords_per_param, flat.size)
        picks = rng.choice(flat.size, size=n_coords, replace=False)
        for k in picks:
            orig = flat[k]
            flat[k] = orig + epsilon
            lp = float(loss_fn().data)
            flat[k] = orig - epsilon
            lm = float(loss_fn().data)
            flat[k] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{k}]")
            numeric = (lp - lm) / (2.0 * epsilon)
            a = float(analytic[name].reshape(-1)[k])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            idx = np.unravel_index(int(k), t.shape) if t.ndim else ()
            entries.append(GradCheckEntry(name, tuple(int(i) for i in idx), a, numeric, rel))

    max_rel = max((e.rel_err for e in entries), default=0.0)
    return GradCheckReport(max_rel_err=max_rel, tolerance=tolerance,
                           passed=max_rel < tolerance, entries=entries)
