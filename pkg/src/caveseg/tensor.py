"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: it carries exactly the forward operations
the segmentation network uses, each paired with its vector-Jacobian product.
Every differentiable operation appends a :class:`Node` to an implicit tape
(ordered by a global sequence number); :func:`backward` replays the reachable
part of that tape in reverse execution order.

Gradients accumulate into ``Tensor.grad`` of leaf tensors until the caller
clears them with :meth:`Tensor.zero_grad`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ParameterError, ShapeError, UsageError, DataError

__all__ = [
    "Tensor",
    "Node",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "tape_of",
    "matmul",
    "softmax",
    "layer_norm",
    "group_norm",
    "gelu",
    "relu",
    "conv2d",
    "adaptive_avg_pool2d",
    "bilinear_resize",
    "cross_entropy",
    "concat",
    "pad",
    "roll",
    "finite_difference_gradient",
    "gradient_check",
]

_state = threading.local()
_seq = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, finite differences)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One executed differentiable operation on the tape."""

    __slots__ = ("seq", "name", "inputs", "backward_fn")

    def __init__(self, name: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_seq)
        self.name = name
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.seq}, {self.name!r})"


class Tensor:
    """N-dimensional float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data if data.dtype == np.float64 else data.astype(np.float64)
        t.grad = None
        t.requires_grad = False
        t.node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, trace: Optional[list] = None) -> None:
        backward(self, trace=trace)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(name, tuple(inputs), backward_fn)
    return out


# ----------------------------------------------------------------------------
# tape replay
# ----------------------------------------------------------------------------


def tape_of(loss: Tensor) -> list:
    """Nodes reachable from ``loss`` in execution order."""
    if loss.node is None:
        return []
    seen = {id(loss.node): loss.node}
    stack = [loss.node]
    while stack:
        node = stack.pop()
        for t in node.inputs:
            n = t.node
            if n is not None and id(n) not in seen:
                seen[id(n)] = n
                stack.append(n)
    return sorted(seen.values(), key=lambda n: n.seq)


def backward(loss: Tensor, trace: Optional[list] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Only leaves (tensors created by the user with ``requires_grad=True``)
    receive a ``grad``; intermediate results are discarded after use. When
    ``trace`` is a list, ``(seq, name)`` of each replayed node is appended.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise UsageError(f"backward() needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not on the tape (no input requires grad)")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        _accumulate_leaf(loss, seed)
        return

    pending: dict[int, np.ndarray] = {id(loss.node): seed}
    for node in reversed(tape_of(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if trace is not None:
            trace.append((node.seq, node.name))
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                _accumulate_leaf(t, gi)
            else:
                key = id(t.node)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(a.data**p, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), bw, "gelu")


# ----------------------------------------------------------------------------
# reductions and shape manipulation
# ----------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "permute")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing; advanced indexing is not supported."""

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _result(np.array(a.data[idx]), (a,), bw, "getitem")


def pad(a: Tensor, widths: Sequence[tuple]) -> Tensor:
    """Zero padding; ``widths`` holds one ``(before, after)`` pair per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if any(v < 0 for w in widths for v in w):
        raise ParameterError(f"negative padding {widths}")
    if not any(v for w in widths for v in w):
        return a
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _result(np.pad(a.data, widths), (a,), lambda g: (g[crop],), "pad")


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _result(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, back, axes),), "roll")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has the same batch axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ParameterError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bw, "softmax")


def _normalize_rows(x2: np.ndarray, eps: float):
    mu = x2.mean(axis=-1, keepdims=True)
    xc = x2 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd


def _normalize_rows_backward(dxhat: np.ndarray, xhat: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return rstd * (dxhat - m1 - xhat * m2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), then scale and shift."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    xhat, rstd = _normalize_rows(x.data, eps)

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dx = _normalize_rows_backward(g * gamma.data, xhat, rstd) if x.requires_grad else None
        return dx, dgamma, dbeta

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of a ``C x H x W`` map; batch-size independent."""
    if eps <= 0:
        raise ParameterError(f"group_norm eps must be positive, got {eps}")
    c = x.shape[0]
    if groups < 1 or c % groups:
        raise ParameterError(f"{c} channels cannot be split into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    xg = x.data.reshape(groups, -1)
    xhat_g, rstd = _normalize_rows(xg, eps)
    xhat = xhat_g.reshape(x.shape)
    scale = gamma.data[:, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(1, 2))
        dbeta = g.sum(axis=(1, 2))
        dx = None
        if x.requires_grad:
            dxhat = (g * scale).reshape(groups, -1)
            dx = _normalize_rows_backward(dxhat, xhat_g, rstd).reshape(x.shape)
        return dx, dgamma, dbeta

    out = xhat * scale + beta.data[:, None, None]
    return _result(out, (x, gamma, beta), bw, "group_norm")


# ----------------------------------------------------------------------------
# convolution, pooling, resampling
# ----------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a ``C_in x H x W`` map with ``C_out x C_in x kh x kw`` kernels.

    Accumulates one matrix product per kernel offset instead of building an
    im2col buffer, which keeps peak memory at a few copies of the input.
    """
    if stride < 1:
        raise ParameterError(f"conv2d stride must be positive, got {stride}")
    if padding < 0:
        raise ParameterError(f"conv2d padding must be non-negative, got {padding}")
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects C x H x W input and 4-d kernel, got {x.shape} and {w.shape}")
    cout, cin, kh, kw = w.shape
    c, h, wd = x.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ParameterError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data

    def window(i, j):
        return (slice(None), slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))

    if kh == kw == 1 and stride == 1:
        out = (w.data[:, :, 0, 0] @ xp.reshape(c, -1)).reshape(cout, ho, wo)
    else:
        out = np.zeros((cout, ho, wo))
        for i in range(kh):
            for j in range(kw):
                out += np.tensordot(w.data[:, :, i, j], xp[window(i, j)], axes=(1, 0))
    if bias is not None:
        out += bias.data[:, None, None]

    def bw(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.tensordot(g, xp[window(i, j)], axes=([1, 2], [1, 2]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[window(i, j)] += np.tensordot(w.data[:, :, i, j], g, axes=(0, 0))
            gx = gxp[:, padding : padding + h, padding : padding + wd]
        gb = g.sum(axis=(1, 2)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, w, bias) if bias is not None else (x, w)
    return _result(out, inputs, bw, "conv2d")


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray, name: str) -> Tensor:
    """Apply ``rows @ x[c] @ cols.T`` to every channel (a separable linear map)."""

    def bw(g):
        return (rows.T @ g @ cols,)

    return _result(rows @ x.data @ cols.T, (x,), bw, name)


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging weights of adaptive pooling; bin i spans floor(i*n/m) .. ceil((i+1)*n/m)."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"adaptive pooling target {out_h}x{out_w} must be positive")
    _, h, w = x.shape
    if out_h > h or out_w > w:
        raise ParameterError(f"adaptive pooling target {out_h}x{out_w} exceeds input {h}x{w}")
    return _separable(x, adaptive_pool_matrix(h, out_h), adaptive_pool_matrix(w, out_w), "adaptive_avg_pool2d")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centre linear interpolation weights (``align_corners=False``).

    Output sample i reads source coordinate ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped at 0 on the low side and to the last sample on the high side.
    """
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(src), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0 if i1 != i0 else 0.0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"resize target {out_h}x{out_w} must be positive")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    return _separable(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w), "bilinear_resize")


# ----------------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels, ignore_index: int = 255) -> Tensor:
    """Mean pixel-wise cross-entropy over non-ignored pixels.

    ``logits`` has the class axis first (``M x N`` or ``M x H x W``); ``labels``
    holds one class id per pixel. Probabilities are never formed explicitly:
    the loss reads ``-log p`` straight from the log-softmax.
    """
    m = logits.shape[0]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[1:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    z = logits.data.reshape(m, -1)
    y = labels.reshape(-1).astype(np.int64)
    valid = y != ignore_index
    bad = valid & ((y < 0) | (y >= m))
    if bad.any():
        raise DataError(f"labels outside 0..{m - 1}: {sorted(set(y[bad].tolist()))[:10]}")
    n = int(valid.sum())
    if n == 0:
        raise DataError("every pixel carries ignore_index; the mean loss is undefined")
    cols = np.flatnonzero(valid)
    rows = y[cols]
    zmax = z.max(axis=0, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    logp_true = shifted[rows, cols] - lse[0, cols]
    loss = -logp_true.sum() / n

    def bw(g):
        p = np.exp(shifted - lse)
        p[:, ~valid] = 0.0
        p[rows, cols] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _result(np.asarray(loss), (logits,), bw, "cross_entropy")


# ----------------------------------------------------------------------------
# verification
# ----------------------------------------------------------------------------


def finite_difference_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                               indices: Optional[Iterable[tuple]] = None) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place and restored. With ``indices`` only those
    elements are evaluated; the rest of the result is NaN.
    """
    if h <= 0:
        raise ParameterError(f"step h must be positive, got {h}")
    grad = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    idx_iter = np.ndindex(*x.shape) if indices is None else indices
    with no_grad():
        for idx in idx_iter:
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = float(np.asarray(_as_tensor(f(x)).data).reshape(()))
            x.data[idx] = orig - h
            fm = float(np.asarray(_as_tensor(f(x)).data).reshape(()))
            x.data[idx] = orig
            grad[idx] = (fp - fm) / (2.0 * h)
    return Tensor._wrap(grad)


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: Optional[tuple] = None

    def ok(self, rtol: float = 1e-4) -> bool:
        return self.max_rel_error <= rtol


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                   skip_below: float = 1e-8, max_per_tensor: Optional[int] = None,
                   seed: int = 0) -> GradCheckResult:
    """Compare tape gradients of ``f()`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|)``; elements where
    ``|a| + |n| < skip_below`` are skipped. ``max_per_tensor`` samples that
    many random elements of each tensor instead of all of them.
    """
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros(p.shape) for p in params]
    rng = np.random.default_rng(seed)
    worst, checked, skipped, max_err = None, 0, 0, 0.0
    for k, (p, a) in enumerate(zip(params, analytic)):
        all_idx = list(np.ndindex(*p.shape))
        if max_per_tensor is not None and len(all_idx) > max_per_tensor:
            pick = rng.choice(len(all_idx), size=max_per_tensor, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        num = finite_difference_gradient(lambda _: f(), p, h, indices=all_idx).data
        for idx in all_idx:
            av, nv = a[idx], num[idx]
            if abs(av) + abs(nv) < skip_below:
                skipped += 1
                continue
            checked += 1
            err = abs(av - nv) / max(abs(av), abs(nv))
            if err > max_err:
                max_err, worst = err, (k, idx, av, nv)
    for p in params:
        p.zero_grad()
    return GradCheckResult(max_err, checked, skipped, worst)
