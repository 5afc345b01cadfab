"""A small dense-tensor engine with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result records its parents and a backward rule mapping the output gradient to
one gradient per parent. :meth:`Tensor.backward` walks the recorded graph in
reverse topological order and accumulates into ``.grad`` of leaf tensors.

Broadcasting is limited to adding/multiplying a trailing-aligned operand
(bias over the last axis, positional table over the batch axis).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import NotScalar, ShapeError, TooShort

DEFAULT_DTYPE = np.float32
GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return tsum(self)

    def mean(self, axis=None):
        return mean(self, axis)


def _lift(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def custom_op(data: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as the output of an op with a user-supplied backward rule.

    ``backward_fn(grad_out)`` returns one gradient (or None) per parent.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_trailing(a: Tensor, b: Tensor, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    tail = big[len(big) - len(small):]
    if any(s != t and s != 1 for s, t in zip(small, tail)):
        raise ShapeError(f"{op}: shapes {sa} and {sb} are not trailing-compatible")


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _lift(b, a)
    _check_trailing(a, b, "add")
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return custom_op(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _lift(b, a)
    _check_trailing(a, b, "mul")
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has exactly
    ``a``'s leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")

    shared = b.ndim == 2

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            if shared:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if shared:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    if shared:
        # one 2-D GEMM is far faster than numpy's batched path, especially on strided views
        a2 = np.ascontiguousarray(a.data).reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = a.data @ b.data
    return custom_op(out, (a, b), rule)


def reshape(a: Tensor, shape) -> Tensor:
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(a.data[index], (a,), rule)


def broadcast_to(a: Tensor, shape) -> Tensor:
    return custom_op(np.broadcast_to(a.data, shape).copy(), (a,),
                     lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def tsum(a: Tensor) -> Tensor:
    return custom_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                     lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.data.size
        return custom_op(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                         lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))
    n = a.shape[axis]
    return custom_op(a.data.mean(axis=axis), (a,),
                     lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),))


def _row_sum(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keeping it (a mat-vec is faster than ufunc.reduce here)."""
    return (a @ np.ones(a.shape[-1], dtype=a.dtype))[..., None]


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    c = x.dtype.type(_SQRT_2_OVER_PI)
    d2 = d * d
    t = d2 * x.dtype.type(GELU_COEF)
    t += 1.0
    t *= d
    t *= c
    np.tanh(t, out=t)
    out = t + 1.0
    out *= d
    out *= 0.5

    def rule(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        slope = d2 * x.dtype.type(3.0 * GELU_COEF)
        slope += 1.0
        slope *= c
        slope *= d
        slope *= 1.0 - t * t
        slope += 1.0 + t
        slope *= 0.5
        slope *= g
        return (slope,)

    return custom_op(out, (x,), rule)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-shifted, so large logits do not overflow)."""
    p = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= _row_sum(p)

    def rule(g):
        gx = g - _row_sum(g * p)
        gx *= p
        return (gx,)

    return custom_op(p, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm over {d} features got gain {gain.shape}, bias {bias.shape}")
    inv_d = x.dtype.type(1.0 / d)
    xhat = x.data - _row_sum(x.data) * inv_d
    inv_std = _row_sum(xhat * xhat)
    inv_std *= inv_d
    inv_std += x.dtype.type(eps)
    inv_std = 1.0 / np.sqrt(inv_std)
    xhat *= inv_std
    out = xhat * gain.data
    out += bias.data

    def rule(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            proj = _row_sum(dxhat * xhat)
            proj *= inv_d
            gx = dxhat - _row_sum(dxhat) * inv_d
            gx -= xhat * proj
            gx *= inv_std
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return custom_op(out, (x, gain, bias), rule)


def conv1d_channels_last(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``x`` [B, L, c_in] with ``w`` [c_out, c_in, k] -> [B, L', c_out]."""
    batch, length, c_in = x.shape
    c_out, w_in, k = w.shape
    if w_in != c_in:
        raise ShapeError(f"conv1d weight expects {w_in} input channels, got {c_in}")
    if length < k:
        raise TooShort(f"conv1d input length {length} < kernel {k}")
    out_len = (length - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=1)[:, ::stride][:, :out_len]
    # column layout (tap, channel) keeps each tap's gradient slice contiguous
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(batch * out_len, k * c_in)
    w2 = np.ascontiguousarray(w.data.transpose(0, 2, 1)).reshape(c_out, k * c_in)

    def rule(g):
        gx = gw = None
        if w.requires_grad:
            gw = g.reshape(-1, c_out).T @ cols
            gw = gw.reshape(c_out, k, c_in).transpose(0, 2, 1)
        if x.requires_grad:
            gcols = (g.reshape(-1, c_out) @ w2).reshape(batch, out_len, k, c_in)
            gx = np.zeros_like(x.data)
            span = stride * (out_len - 1) + 1
            for j in range(k):
                gx[:, j:j + span:stride, :] += gcols[:, :, j, :]
        return gx, gw

    return custom_op((cols @ w2.T).reshape(batch, out_len, c_out), (x, w), rule)


def conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D cross-correlation, channels-first.

    ``x`` is [c_in, L] or [B, c_in, L]; ``w`` is [c_out, c_in, k]. Output
    length is ``(L - k) // stride + 1``.
    """
    if x.ndim == 2:
        return conv1d(reshape(x, (1,) + x.shape), w, stride)[0]
    y = conv1d_channels_last(transpose(x, (0, 2, 1)), w, stride)
    return transpose(y, (0, 2, 1))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return custom_op(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``).

    ``logits`` is [B, C] (or [C] for a single example). Optional per-class
    ``weights`` give a weighted mean.
    """
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows of logits")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    rows = np.arange(n)
    w = np.ones(n, dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)[labels]
    total = w.sum()
    loss = -(w * log_p[rows, labels]).sum() / total

    def rule(g):
        grad = np.exp(log_p)
        grad[rows, labels] -= 1.0
        grad *= (w / total)[:, None] * g
        return (grad[0] if single else grad,)

    return custom_op(np.asarray(loss, dtype=logits.dtype), (logits,), rule)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def gradient_errors(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
                    max_entries: int | None = None, seed: int = 0) -> np.ndarray:
    """Elementwise relative error between backprop and central differences.

    ``f`` maps float64 Tensors to a scalar Tensor. The error for one entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``. With
    ``max_entries`` only a random subset of each input's entries is probed.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    if out.data.size != 1:
        raise NotScalar("grad_check needs a scalar-valued function")
    backward(out)
    rng = np.random.default_rng(seed)
    errors = []
    for i, (arr, leaf) in enumerate(zip(arrays, leaves)):
        analytic = np.zeros_like(arr) if leaf.grad is None else leaf.grad
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = np.sort(rng.choice(arr.size, max_entries, replace=False))
        for j in flat_idx:
            idx = np.unravel_index(j, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            hi = f(*[Tensor(a) for a in arrays]).item()
            arr[idx] = orig - eps
            lo = f(*[Tensor(a) for a in arrays]).item()
            arr[idx] = orig
            numeric = (hi - lo) / (2 * eps)
            a = analytic[idx]
            errors.append(abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return np.asarray(errors)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error of backprop gradients against central differences (float64 replay)."""
    errs = gradient_errors(f, inputs, eps, max_entries, seed)
    return float(errs.max()) if errs.size else 0.0
