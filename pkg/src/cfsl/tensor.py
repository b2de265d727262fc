"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the primitives the model and losses need are provided. Every op
returns a new :class:`Tensor`; when any input requires grad the output
keeps its parents and a closure mapping the output gradient to input
gradients. Tensors carry a monotonically increasing id, so parents are
always older than children and a sort by id is a valid topological order.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import kernels

L2_EPS = 1e-12

_ids = itertools.count()
_kink_log: list | None = None
_grad_enabled = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if op == "leaf" and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite value in tensor input")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every grad-enabled leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen.add(t._id)
            order.append(t)
            stack.extend(t._parents)
        order.sort(key=lambda t: t._id, reverse=True)

        grads = {self._id: np.ones_like(self.data)}
        for t in order:
            g = grads.pop(t._id, None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg


def tensor(data, requires_grad=False):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


@contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data, parents, backward, op):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _record_kink(pattern):
    if _kink_log is not None:
        _kink_log.append(np.asarray(pattern).copy())


@contextmanager
def record_kinks():
    """Collect the branch pattern of every non-smooth op evaluated inside."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def note_selection(indices):
    """Register a non-differentiable index selection (e.g. top-k) for kink tracking."""
    _record_kink(indices)


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def abs(a):  # noqa: A001 - mirrors numpy naming
    _record_kink(a.data >= 0)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def relu(a):
    mask = a.data > 0
    _record_kink(mask)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# -- linear algebra / conv -----------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def conv2d(x, w, b):
    """Stride-1, zero-padded 'same' convolution.

    x: (N, H, W, Cin), w: (k, k, Cin, Cout), b: (Cout,). Returns (N, H, W, Cout).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ValueError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ValueError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    if b.shape != (w.shape[3],):
        raise ValueError(f"conv2d: shape mismatch {b.shape} vs {(w.shape[3],)}")
    n, h, wd, _ = x.shape
    k, cout = w.shape[0], w.shape[3]
    cols = kernels.im2col(x.data, k)
    wmat = w.data.reshape(-1, cout)
    out = cols @ wmat
    out += b.data
    out = out.reshape(n, h, wd, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = kernels.col2im(g2 @ wmat.T, x.shape, k) if x.requires_grad else None
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, w, b), backward, "conv2d")


# -- pooling -------------------------------------------------------------------

def avg_pool2(x):
    """2x2 non-overlapping average pool on (N, H, W, C)."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: spatial size {(h, w)} not divisible by 2")
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(g):
        g4 = np.broadcast_to((g * 0.25)[:, :, None, :, None, :], (n, h // 2, 2, w // 2, 2, c))
        return (g4.reshape(n, h, w, c),)

    return _make(out, (x,), backward, "avg_pool2")


def global_avg_pool(x):
    """(N, H, W, C) -> (N, C) spatial mean."""
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, None, None, :], x.shape).copy(),)

    return _make(out, (x,), backward, "global_avg_pool")


# -- normalization / shaping ---------------------------------------------------

def l2_normalize(x, axis=-1):
    """x / max(||x||, eps) along ``axis``; a zero vector maps to zero."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    denom = np.maximum(norm, L2_EPS)
    y = x.data / denom
    small = norm < L2_EPS

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        gx = (g - np.where(small, 0.0, y * dot)) / denom
        return (gx,)

    return _make(y, (x,), backward, "l2_normalize")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ValueError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                 backward, "concat")


def reshape(x, shape):
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def take_rows(x, index):
    """Gather rows of a 2-D tensor: out[i] = x[index[i]]."""
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 2:
        raise ValueError(f"take_rows: expected 2-D input, got {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), backward, "take_rows")


# -- reductions / losses ------------------------------------------------------

def sum(x):  # noqa: A001
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def masked_sum(x, mask):
    """Sum of the entries of x where the boolean ``mask`` is set."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ValueError(f"masked_sum: shape mismatch {x.shape} vs {mask.shape}")
    m = mask.astype(np.float64)
    return _make(np.asarray((x.data * m).sum()), (x,), lambda g: (g * m,), "masked_sum")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (B, K) logits against integer labels (B,)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
        labels = labels.reshape(1)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"cross_entropy: shape mismatch {logits.shape} vs {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - shifted[rows, labels])

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


# -- gradient check ------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    excluded: list = field(default_factory=list)
    worst_index: int | None = None


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def check_gradient(loss_builder, leaf, step=1e-5, tol=1e-4):
    """Compare the analytic gradient of ``loss_builder()`` w.r.t. ``leaf``
    against central differences.

    Coordinates where a perturbation of +-step flips the branch of any
    non-smooth op (relu, abs, top-k selection) are reported in
    ``excluded`` and skipped.
    """
    def evaluate():
        with record_kinks() as log:
            val = float(loss_builder().data)
        return val, log

    base, base_kinks = evaluate()
    again, _ = evaluate()
    if base != again:
        raise ValueError("loss_builder is not deterministic")

    leaf.grad = None
    leaf.requires_grad = True
    loss_builder().backward()
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
    leaf.grad = None

    flat = leaf.data.reshape(-1)
    numeric = np.zeros(flat.size)
    excluded = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp, kp = evaluate()
        flat[i] = orig - step
        fm, km = evaluate()
        flat[i] = orig
        if not (_same_pattern(kp, base_kinks) and _same_pattern(km, base_kinks)):
            excluded.append(i)
            continue
        numeric[i] = (fp - fm) / (2 * step)

    keep = np.ones(flat.size, dtype=bool)
    keep[excluded] = False
    err = _rel_err(analytic.reshape(-1), numeric)[keep]
    worst = float(err.max()) if err.size else 0.0
    worst_idx = int(np.flatnonzero(keep)[err.argmax()]) if err.size else None
    return GradCheckReport(worst, worst <= tol, int(keep.sum()), excluded, worst_idx)


def _same_pattern(a, b):
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))
