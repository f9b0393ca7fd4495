"""A small float64 tensor library with tape-based reverse-mode differentiation.

Every primitive records a closure on the output tensor that maps the output
gradient to input gradients. ``backward`` walks the tape in reverse
topological order, accumulating gradients additively, so tensors used more
than once receive the sum of their contributions.
"""

from __future__ import annotations

import contextlib
import logging
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import _kernels
from .errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    out.op = op
    if not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite value produced by {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def neg(a) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def leaky_relu(x, slope=0.2) -> Tensor:
    pos = x.data > 0
    data = np.where(pos, x.data, slope * x.data)
    return _make(data, (x,), lambda g: _accumulate(x, np.where(pos, g, slope * g)), "leaky_relu")


def relu(x) -> Tensor:
    pos = x.data > 0
    return _make(x.data * pos, (x,), lambda g: _accumulate(x, g * pos), "relu")


def elu(x, alpha=1.0) -> Tensor:
    pos = x.data > 0
    ex = alpha * np.expm1(np.minimum(x.data, 0.0))
    data = np.where(pos, x.data, ex)
    return _make(data, (x,), lambda g: _accumulate(x, np.where(pos, g, g * (ex + alpha))), "elu")


def tanh(x) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: _accumulate(x, g * (1.0 - t * t)), "tanh")


def sigmoid(x) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: _accumulate(x, g * s * (1.0 - s)), "sigmoid")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def dropout(x, rate, rng: np.random.Generator | None, training=True) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``."""
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: _accumulate(x, g * keep), "dropout")


# -- shape ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(data, (a, b), backward, "matmul")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(data, tensors, backward, "concat")


def concat_rows(tensors) -> Tensor:
    return concat(tensors, axis=0)


def reshape(x, shape) -> Tensor:
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(orig)), "reshape")


def transpose(x, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: _accumulate(x, np.transpose(g, inv)), "transpose")


def index_select(x, index) -> Tensor:
    data = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full)

    return _make(data, (x,), backward, "index")


def embedding_gather(table, indices) -> Tensor:
    """Rows of ``table`` at ``indices`` (any integer array shape)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(f"embedding_gather: index out of range for {table.shape[0]} rows")
    data = table.data[indices]

    def backward(g):
        full = np.zeros_like(table.data)
        flat = g.reshape(-1, table.shape[1]) if table.ndim == 2 else g.reshape((-1,) + table.shape[1:])
        np.add.at(full, indices.reshape(-1), flat)
        _accumulate(table, full)

    return _make(data, (table,), backward, "embedding_gather")


# -- reductions -------------------------------------------------------------

def tsum(x, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(data, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        axes = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        _accumulate(beta, g.sum(axis=axes))
        gx = g * gamma.data
        _accumulate(x, inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(data, (x, gamma, beta), backward, "layer_norm")


def masked_softmax(x, mask=None, axis=-1) -> Tensor:
    """Softmax along ``axis`` restricted to entries where ``mask`` is true.

    Masked entries are exactly zero. A slice with no unmasked entry is an error.
    """
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(mask.any(axis=axis)):
        raise NumericalError("masked_softmax: fully masked row")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    ex = np.where(mask, np.exp(z), 0.0)
    s = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), backward, "masked_softmax")


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: {logits.shape} vs targets {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("bce_with_logits: targets must be binary")
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    return _make(per.mean(), (logits,), lambda g: _accumulate(logits, g * (_sigmoid(z) - y) / n), "bce_with_logits")


# -- graph primitives -------------------------------------------------------

def segment_softmax(scores, seg_ptr) -> Tensor:
    """Softmax of ``scores`` (E x H) within CSR segments of edges."""
    seg_ptr = np.asarray(seg_ptr, dtype=np.int64)
    if np.any(np.diff(seg_ptr) <= 0):
        raise NumericalError("segment_softmax: empty segment (node without neighbours)")
    alpha = _kernels.segment_softmax(scores.data, seg_ptr)

    def backward(g):
        _accumulate(scores, _kernels.segment_softmax_backward(alpha, g, seg_ptr))

    return _make(alpha, (scores,), backward, "segment_softmax")


def spmm_heads(alpha, src, seg_ptr, values) -> Tensor:
    """Per-head weighted aggregation: ``out[s, h] = sum_e alpha[e, h] * values[src[e], h]``."""
    src = np.asarray(src, dtype=np.int64)
    seg_ptr = np.asarray(seg_ptr, dtype=np.int64)
    out = _kernels.spmm_heads(alpha.data, src, seg_ptr, values.data)

    def backward(g):
        ga, gv = _kernels.spmm_heads_backward(alpha.data, src, seg_ptr, values.data, g)
        _accumulate(alpha, ga)
        _accumulate(values, gv)

    return _make(out, (alpha, values), backward, "spmm_heads")


# -- tape traversal ---------------------------------------------------------

def backward(loss: Tensor) -> dict:
    """Back-propagate from a scalar ``loss``; returns ``{leaf tensor: gradient}``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
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
    loss.grad = np.ones_like(loss.data)
    leaves = {}
    for node in reversed(order):
        if node._backward is not None:
            if node.grad is not None:
                node._backward(node.grad)
            node.grad = None  # intermediate gradients are not retained
            node._backward = None
            node._parents = ()
        elif node.requires_grad:
            leaves[node] = node.grad
    return leaves


# -- modules and optimisation ------------------------------------------------

class Module:
    """Base class collecting named parameters from attributes."""

    training = True

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def train(self, mode=True):
        for val in vars(self).values():
            if isinstance(val, Module):
                val.train(mode)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item.train(mode)
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


class Adam:
    """Adaptive-moment optimiser with bias correction."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads=None) -> bool:
        """Apply one update. Returns False (and skips) if any gradient is non-finite."""
        if grads is None:
            grads = [p.grad for p in self.params]
        grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(self.params, grads)]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                logger.warning("non-finite gradient for %s; step skipped", p.name or p)
                return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(params: dict, path) -> None:
    """Write ``name -> array`` as row-major float64 blocks plus a text index.

    Produces ``<path>.bin`` and ``<path>.idx``; the index has one
    ``name<TAB>shape<TAB>offset`` line per parameter in write order.
    """
    path = Path(path)
    lines = []
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            fh.write(arr.tobytes(order="C"))
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{name}\t{shape}\t{offset}")
            offset += arr.nbytes
    path.with_suffix(".idx").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> dict:
    path = Path(path)
    raw = path.with_suffix(".bin").read_bytes()
    out = {}
    for line in path.with_suffix(".idx").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, shape, offset = line.split("\t")
        shape = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=int(offset))
        out[name] = arr.reshape(shape).copy()
    return out


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps=1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g
