"""Minimal dense tensor engine with reverse-mode automatic differentiation.

Every tensor wraps a C-contiguous float64 ``numpy`` buffer. Operations that
involve at least one tensor with ``requires_grad`` record a node holding the
input references and a closure that maps the output gradient to input
gradients. :func:`backward` walks the recorded graph in reverse topological
order, visiting each node once, and *accumulates* into leaf ``.grad`` buffers.
Call :func:`zero_grad` between steps.

Matrix products and convolutions report multiply-accumulate counts to an
optional :class:`MacCounter` so analytic complexity models can be checked
against what actually executes.
"""
from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True
_COUNTER: Optional["MacCounter"] = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class MacCounter:
    """Accumulates multiply-accumulate counts, optionally split by scope."""

    def __init__(self):
        self.total = 0
        self.by_scope: dict[str, int] = defaultdict(int)
        self._scope: list[str] = []

    def add(self, n: int) -> None:
        self.total += int(n)
        key = self._scope[-1] if self._scope else ""
        self.by_scope[key] += int(n)

    @contextlib.contextmanager
    def scope(self, name: str):
        self._scope.append(name)
        try:
            yield self
        finally:
            self._scope.pop()


@contextlib.contextmanager
def count_macs():
    global _COUNTER
    prev = _COUNTER
    _COUNTER = MacCounter()
    try:
        yield _COUNTER
    finally:
        _COUNTER = prev


@contextlib.contextmanager
def mac_scope(name: str):
    """Attribute MACs recorded inside the block to ``name`` (no-op when not counting)."""
    if _COUNTER is None:
        yield None
    else:
        with _COUNTER.scope(name):
            yield _COUNTER


def _count(n: int) -> None:
    if _COUNTER is not None:
        _COUNTER.add(n)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    ``loss`` must hold exactly one element. Gradients add to existing leaf
    buffers; nothing is reset.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    """Square root whose derivative at exactly 0 is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def fn(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _node(out, (a,), fn)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(np.ascontiguousarray(a.data[index]), (a,), fn)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        gm = np.moveaxis(g, axis, 0)
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, idx.reshape(-1), gm.reshape((-1,) + gm.shape[idx.ndim:]))
        return (out,)

    return _node(np.take(a.data, idx, axis=axis), (a,), fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return _node(np.stack([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def roll(a, shift, axis) -> Tensor:
    a = as_tensor(a)
    if isinstance(shift, int):
        back = -shift
    else:
        back = tuple(-s for s in shift)
    return _node(np.roll(a.data, shift, axis=axis), (a,), lambda g: (np.roll(g, back, axis=axis),))


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    _count(out.size * ad.shape[-1])

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(out, (a, b), fn)


def linear(x, w, b=None) -> Tensor:
    """``y[..., j] = sum_k x[..., k] w[k, j] + b[j]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or (b is not None and as_tensor(b).shape != (w.shape[1],)):
        bshape = None if b is None else as_tensor(b).shape
        raise DimensionError(f"linear shape mismatch: x{x.shape}, w{w.shape}, b{bshape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    _count(x2.shape[0] * wd.shape[0] * wd.shape[1])
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def fn(g):
        g2 = g.reshape(-1, wd.shape[1])
        grads = [(g2 @ wd.T).reshape(xd.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, fn)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with population variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layernorm needs a non-empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm affine shapes {gamma.shape}, {beta.shape} do not match d={d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def fn(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _node(out, (x, gamma, beta), fn)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _node(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh-approximation GELU."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _node(out, (x,), fn)


def attention(q, k, v, additive_mask=None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``additive_mask`` broadcasts against the ``[..., n, n]`` score tensor and
    holds 0 for allowed pairs and ``-inf`` for blocked ones.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"attention q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[-1]
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(d))
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask, dtype=np.float64)
        if np.any(np.all(np.isneginf(m), axis=-1)):
            raise ContractError("attention mask blocks every key for at least one query")
        scores = add(scores, Tensor(m))
    return matmul(softmax(scores), v)


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise DimensionError(f"expected an int or 3 ints, got {v}")
    return v


def _corr(xp: np.ndarray, k: np.ndarray, s) -> np.ndarray:
    """Strided cross-correlation of padded ``xp`` [N,ci,...] with ``k`` [co,ci,...]."""
    kd, kh, kw = k.shape[2:]
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::s[0], ::s[1], ::s[2]]
    out = np.tensordot(win, k, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _corr_adjoint(g: np.ndarray, k: np.ndarray, s, full_shape) -> np.ndarray:
    """Adjoint of :func:`_corr`: scatter ``g`` [N,co,...] back to [N,ci,*full_shape]."""
    n, _, do, ho, wo = g.shape
    kd, kh, kw = k.shape[2:]
    out = np.zeros((n, k.shape[1]) + tuple(full_shape))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                contrib = np.tensordot(g, k[:, :, a, b, c], axes=([1], [0]))
                out[:, :, a:a + s[0] * (do - 1) + 1:s[0],
                    b:b + s[1] * (ho - 1) + 1:s[1],
                    c:c + s[2] * (wo - 1) + 1:s[2]] += np.moveaxis(contrib, -1, 1)
    return out


def _corr_wgrad(xp: np.ndarray, g: np.ndarray, s, ksize) -> np.ndarray:
    do, ho, wo = g.shape[2:]
    win = sliding_window_view(xp, tuple(ksize), axis=(2, 3, 4))[:, :, ::s[0], ::s[1], ::s[2]]
    win = win[:, :, :do, :ho, :wo]
    return np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d(x, k, b=None, stride=1, pad=0) -> Tensor:
    """Direct 3D cross-correlation.

    ``x`` is ``[c_in, D, H, W]`` or batched ``[N, c_in, D, H, W]``; ``k`` is
    ``[c_out, c_in, kd, kh, kw]``. Output extent per axis is
    ``floor((D + 2*pad - kd) / stride) + 1``.
    """
    x, k = as_tensor(x), as_tensor(k)
    s, p = _triple(stride), _triple(pad)
    if min(s) < 1:
        raise DimensionError(f"stride must be >= 1, got {s}")
    unbatched = x.ndim == 4
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 5 or k.ndim != 5 or xd.shape[1] != k.shape[1]:
        raise DimensionError(f"conv3d shape mismatch: x{x.shape}, k{k.shape}")
    for n, kk, pp in zip(xd.shape[2:], k.shape[2:], p):
        if kk > n + 2 * pp:
            raise DimensionError(f"kernel {k.shape[2:]} larger than padded input {xd.shape[2:]} (pad {p})")
    xp = np.pad(xd, ((0, 0), (0, 0)) + tuple((pp, pp) for pp in p))
    kd = k.data
    out = _corr(xp, kd, s)
    _count(out.size * kd.shape[1] * int(np.prod(kd.shape[2:])))
    parents = [x, k]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None, None]
        parents.append(b)

    def fn(g):
        if unbatched:
            g = g[None]
        gxp = _corr_adjoint(g, kd, s, xp.shape[2:])
        gx = gxp[:, :, p[0]:p[0] + xd.shape[2], p[1]:p[1] + xd.shape[3], p[2]:p[2] + xd.shape[4]]
        gx = np.ascontiguousarray(gx[0] if unbatched else gx)
        grads = [gx, _corr_wgrad(xp, g, s, kd.shape[2:])]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return _node(out[0] if unbatched else out, parents, fn)


def conv_transpose3d(x, k, b=None, stride=1, pad=0, output_padding=0) -> Tensor:
    """Adjoint of :func:`conv3d` with the same ``k``, ``stride`` and ``pad``.

    ``k`` is ``[c_in, c_out, kd, kh, kw]`` (the layout of the conv3d kernel it
    transposes). Output extent per axis is
    ``(D - 1)*stride - 2*pad + kd + output_padding``.
    """
    x, k = as_tensor(x), as_tensor(k)
    s, p, op = _triple(stride), _triple(pad), _triple(output_padding)
    if min(s) < 1:
        raise DimensionError(f"stride must be >= 1, got {s}")
    unbatched = x.ndim == 4
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 5 or k.ndim != 5 or xd.shape[1] != k.shape[0]:
        raise DimensionError(f"conv_transpose3d shape mismatch: x{x.shape}, k{k.shape}")
    kd = k.data
    in_sp = xd.shape[2:]
    out_sp = tuple((n - 1) * ss - 2 * pp + kk + oo
                   for n, ss, pp, kk, oo in zip(in_sp, s, p, kd.shape[2:], op))
    if min(out_sp) < 1:
        raise DimensionError(f"conv_transpose3d produces empty output {out_sp}")
    full = tuple((n - 1) * ss + kk + oo for n, ss, kk, oo in zip(in_sp, s, kd.shape[2:], op))
    out_full = _corr_adjoint(xd, kd, s, full)
    out = out_full[:, :, p[0]:p[0] + out_sp[0], p[1]:p[1] + out_sp[1], p[2]:p[2] + out_sp[2]]
    out = np.ascontiguousarray(out)
    _count(xd.size // xd.shape[1] * kd.shape[0] * kd.shape[1] * int(np.prod(kd.shape[2:])))
    parents = [x, k]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None, None]
        parents.append(b)

    def fn(g):
        if unbatched:
            g = g[None]
        gfull = np.zeros((g.shape[0], g.shape[1]) + full)
        gfull[:, :, p[0]:p[0] + out_sp[0], p[1]:p[1] + out_sp[1], p[2]:p[2] + out_sp[2]] = g
        gx = _corr(gfull, kd, s)[:, :, :in_sp[0], :in_sp[1], :in_sp[2]]
        gx = np.ascontiguousarray(gx[0] if unbatched else gx)
        grads = [gx, _corr_wgrad(gfull, xd, s, kd.shape[2:])]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return _node(out[0] if unbatched else out, parents, fn)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3,
                      coords: Optional[Iterable[int]] = None, floor: float = 1e-8) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a tensor to a scalar tensor. The error at flat coordinate ``i``
    is ``|ad_i - fd_i| / (|fd_i| + floor)``; ``coords`` restricts the scan.
    """
    x = Tensor(np.array(as_tensor(x).data), requires_grad=True)
    backward(f(x))
    ad = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1)
    flat = x.data.reshape(-1)
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(ad[i] - fd) / (abs(fd) + floor))
    return worst
