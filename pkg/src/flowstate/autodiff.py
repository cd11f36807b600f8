"""Tape-based reverse-mode differentiation over numpy arrays.

Every op accepts plain arrays or :class:`Var` handles. When no input is a
``Var`` the op just returns the numpy result, so the same model code serves
inference and training.

Complex values are differentiated for real-valued losses only. The adjoint
stored for a complex node is ``dL/dRe + 1j * dL/dIm``; real inputs receive
the real part of whatever flows into them. Under this convention a
holomorphic op ``w = f(z)`` pulls back as ``conj(f'(z)) * g``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .scan import scan_arrays


class StructureError(RuntimeError):
    """The tape cannot be differentiated as requested."""


class Var:
    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape}, dtype={self.value.dtype})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class _Node:
    __slots__ = ("op", "inputs", "ctx")

    def __init__(self, op, inputs, ctx):
        self.op = op
        self.inputs = inputs
        self.ctx = ctx


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Var:
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.complexfloating):
            value = value.astype(np.float64, copy=False)
        return self._push(_Node("leaf", (), None), value)

    def _push(self, node: _Node, value: np.ndarray) -> Var:
        var = Var(value, self, len(self.nodes))
        self.nodes.append(node)
        self.values.append(value)
        return var

    def backward(self, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each var in ``wrt``."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise StructureError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise StructureError(f"loss must be scalar, got shape {loss.value.shape}")
        return self.vjp(loss, np.ones_like(loss.value, dtype=np.float64), wrt)

    def vjp(self, output: Var, cotangent, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Pull ``cotangent`` (shaped like ``output``) back to each var in ``wrt``."""
        if not isinstance(output, Var) or output.tape is not self:
            raise StructureError("output was not recorded on this tape")
        for w in wrt:
            if not isinstance(w, Var) or w.tape is not self:
                raise StructureError(f"{w!r} is not recorded on this tape")
        cotangent = np.asarray(cotangent)
        if cotangent.shape != output.value.shape:
            raise StructureError(f"cotangent shape {cotangent.shape} != output shape {output.value.shape}")
        adj: list = [None] * (output.index + 1)
        adj[output.index] = cotangent
        for i in range(output.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = self.nodes[i]
            if not node.inputs:
                continue
            grads = VJP[node.op](g, node.ctx, [_val(x) for x in node.inputs])
            for x, gx in zip(node.inputs, grads):
                if gx is None or not isinstance(x, Var):
                    continue
                if x.index >= i:
                    raise StructureError(f"node {i} ({node.op}) consumes later node {x.index}")
                gx = _fit(gx, x.value)
                if adj[x.index] is None:
                    adj[x.index] = gx
                else:
                    adj[x.index] = adj[x.index] + gx
        out = []
        for w in wrt:
            g = adj[w.index] if w.index < len(adj) else None
            out.append(np.zeros_like(w.value) if g is None else g)
        return out


def _val(x):
    return x.value if isinstance(x, Var) else x


def _fit(g, like):
    """Sum broadcast axes away and drop imaginary parts flowing into real values."""
    g = np.asarray(g)
    shape = np.shape(like)
    if g.shape != shape:
        extra = g.ndim - len(shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        g = g.reshape(shape)
    if np.iscomplexobj(g) and not np.iscomplexobj(like):
        g = g.real
    return g


def _apply(op: str, value, inputs: tuple, ctx=None):
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise StructureError("inputs come from different tapes")
    if tape is None:
        return value
    return tape._push(_Node(op, inputs, ctx), value)


def value(x):
    """Underlying array of a var or array."""
    return _val(x)


VJP: dict[str, Callable] = {}


def _rule(name):
    def register(fn):
        VJP[name] = fn
        return fn

    return register


# ---------------------------------------------------------------- elementwise


def add(a, b):
    return _apply("add", _val(a) + _val(b), (a, b))


@_rule("add")
def _add_vjp(g, ctx, xs):
    return g, g


def sub(a, b):
    return _apply("sub", _val(a) - _val(b), (a, b))


@_rule("sub")
def _sub_vjp(g, ctx, xs):
    return g, -g


def neg(a):
    return _apply("neg", -_val(a), (a,))


@_rule("neg")
def _neg_vjp(g, ctx, xs):
    return (-g,)


def mul(a, b):
    return _apply("mul", _val(a) * _val(b), (a, b))


@_rule("mul")
def _mul_vjp(g, ctx, xs):
    a, b = xs
    return g * np.conj(b), g * np.conj(a)


def div(a, b):
    return _apply("div", _val(a) / _val(b), (a, b))


@_rule("div")
def _div_vjp(g, ctx, xs):
    a, b = xs
    gb = g / np.conj(b)
    return gb, -gb * np.conj(a / b)


def exp(a):
    out = np.exp(_val(a))
    return _apply("exp", out, (a,), out)


@_rule("exp")
def _exp_vjp(g, ctx, xs):
    return (g * np.conj(ctx),)


def gelu(a):
    x = _val(a)
    return _apply("gelu", 0.5 * x * (1.0 + erf(x / np.sqrt(2.0))), (a,))


@_rule("gelu")
def _gelu_vjp(g, ctx, xs):
    (x,) = xs
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return (g * (cdf + x * pdf),)


def complex_(re, im):
    return _apply("complex", _val(re) + 1j * _val(im), (re, im))


@_rule("complex")
def _complex_vjp(g, ctx, xs):
    g = np.asarray(g, dtype=np.complex128)
    return g.real, g.imag


def real(z):
    return _apply("real", np.real(_val(z)).copy(), (z,))


@_rule("real")
def _real_vjp(g, ctx, xs):
    return (np.asarray(g, dtype=np.complex128),)


ZOH_TINY = 1e-12
ZOH_SERIES = 1e-3


def zoh_scale(lam, dt):
    """``(exp(lam*dt) - 1) / lam`` elementwise, ``dt`` in the ``lam -> 0`` limit.

    For ``|lam*dt| < ZOH_SERIES`` the quotient cancels badly, so a short
    Taylor series (truncation error below 1e-17 relative) is used there.
    """
    lv, dv = _val(lam), _val(dt)
    z = lv * dv
    e = np.exp(z)
    tiny = np.abs(lv) < ZOH_TINY
    small = ~tiny & (np.abs(z) < ZOH_SERIES)
    safe = np.where(tiny | small, 1.0, lv)
    series = dv * (1.0 + z * (1 / 2 + z * (1 / 6 + z * (1 / 24 + z * (1 / 120 + z / 720)))))
    out = np.where(tiny, dv + 0j * lv, np.where(small, series, (e - 1.0) / safe))
    return _apply("zoh_scale", out, (lam, dt), (e, out, tiny, small, safe, z))


@_rule("zoh_scale")
def _zoh_scale_vjp(g, ctx, xs):
    e, out, tiny, small, safe, z = ctx
    lv, dv = xs
    d_series = dv * dv * (1 / 2 + z * (1 / 3 + z * (1 / 8 + z * (1 / 30 + z / 144))))
    d_lam = np.where(tiny, 0.5 * dv * dv, np.where(small, d_series, (dv * e - out) / safe))
    d_dt = np.where(tiny, 1.0 + 0j, e)
    return g * np.conj(d_lam), g * np.conj(d_dt)


# ------------------------------------------------------------------- linear


def _matmul_rows(a, b):
    """``a @ b`` whose rows do not depend on how many rows there are.

    BLAS sends single-row products to gemv, which rounds differently from
    gemm; a zero row keeps them on gemm so truncated sequences reproduce
    prefixes bit for bit.
    """
    if np.ndim(a) >= 2 and np.ndim(b) == 2 and a.shape[-2] == 1:
        pad = np.concatenate([a, np.zeros_like(a)], axis=-2)
        return np.matmul(pad, b)[..., :1, :]
    return np.matmul(a, b)


def matmul(a, b):
    return _apply("matmul", _matmul_rows(_val(a), _val(b)), (a, b))


def _mT(x):
    return np.swapaxes(x, -1, -2) if np.ndim(x) >= 2 else x


def _conj(x):
    return np.conj(x) if np.iscomplexobj(x) else x


@_rule("matmul")
def _matmul_vjp(g, ctx, xs):
    a, b = xs
    if np.ndim(a) == 1 and np.ndim(b) == 1:
        return g * _conj(b), g * _conj(a)
    if np.ndim(b) == 1:
        return g[..., None] * _conj(b), np.einsum("...i,...ij->j", g, _conj(a))
    if np.ndim(a) == 1:
        return np.matmul(g[..., None, :], _mT(_conj(b)))[..., 0, :], _conj(a)[:, None] * g[..., None, :]
    if np.ndim(b) == 2:
        # batched activations against one weight matrix: fold batch into rows
        a2 = np.reshape(a, (-1, a.shape[-1]))
        g2 = np.reshape(g, (-1, g.shape[-1]))
        return np.matmul(g, _conj(b).T), np.matmul(_conj(a2).T, g2)
    return np.matmul(g, _mT(_conj(b))), np.matmul(_mT(_conj(a)), g)


def reshape(a, shape):
    return _apply("reshape", np.reshape(_val(a), shape), (a,))


@_rule("reshape")
def _reshape_vjp(g, ctx, xs):
    return (np.reshape(g, np.shape(xs[0])),)


def transpose(a, axes=None):
    return _apply("transpose", np.transpose(_val(a), axes), (a,), axes)


@_rule("transpose")
def _transpose_vjp(g, ctx, xs):
    if ctx is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(ctx)),)


def getitem(a, idx):
    return _apply("getitem", _val(a)[idx], (a,), idx)


def _basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


@_rule("getitem")
def _getitem_vjp(g, ctx, xs):
    (x,) = xs
    out = np.zeros(np.shape(x), dtype=np.result_type(x, g))
    if _basic_index(ctx):
        out[ctx] += g
    else:
        np.add.at(out, ctx, g)
    return (out,)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return _apply("sum", np.sum(_val(a), axis=axis, keepdims=keepdims), (a,), (axis, keepdims))


@_rule("sum")
def _sum_vjp(g, ctx, xs):
    axis, keepdims = ctx
    x = xs[0]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, np.shape(x)),)


def mean(a, axis=None, keepdims=False):
    x = _val(a)
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return _apply("mean", np.mean(x, axis=axis, keepdims=keepdims), (a,), (axis, keepdims, n))


@_rule("mean")
def _mean_vjp(g, ctx, xs):
    axis, keepdims, n = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, np.shape(xs[0])) / n,)


# ---------------------------------------------------------------- model ops


def layer_norm(a, eps: float = 1e-5):
    """Normalize over the last axis (no affine parameters)."""
    x = _val(a)
    m = x.mean(axis=-1, keepdims=True)
    c = x - m
    inv = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)
    y = c * inv
    return _apply("layer_norm", y, (a,), (y, inv))


@_rule("layer_norm")
def _layer_norm_vjp(g, ctx, xs):
    y, inv = ctx
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * y).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - y * gy),)


def linear_scan(a, b, axis: int = -2):
    """States of ``s_k = a * s_{k-1} + b_k`` along ``axis`` with time-invariant ``a``."""
    av, bv = _val(a), _val(b)
    s = scan_arrays(av, bv, axis=axis)
    return _apply("linear_scan", s, (a, b), (s, axis))


@_rule("linear_scan")
def _linear_scan_vjp(g, ctx, xs):
    s, axis = ctx
    a, b = xs
    # adjoint recurrence runs backwards in time with the conjugate transition
    gf = np.flip(g, axis=axis)
    G = np.flip(scan_arrays(np.conj(a), gf, axis=axis), axis=axis)
    n = s.shape[axis]
    prev = np.take(s, np.arange(n - 1), axis=axis)
    cur = np.take(G, np.arange(1, n), axis=axis)
    ga = cur * np.conj(prev)
    return ga, G


def pinball_loss(pred, target, levels):
    """Mean pinball loss; ``pred`` has quantiles on its last axis."""
    p = _val(pred)
    q = np.asarray(levels, dtype=np.float64)
    if np.any((q <= 0) | (q >= 1)):
        raise ValueError("quantile levels must lie in (0, 1)")
    y = np.asarray(_val(target), dtype=np.float64)[..., None]
    e = y - p
    loss = np.maximum(q * e, (q - 1.0) * e)
    return _apply("pinball", np.asarray(loss.mean()), (pred, target), (e, q, loss.size))


@_rule("pinball")
def _pinball_vjp(g, ctx, xs):
    e, q, n = ctx
    dpred = np.where(e > 0, -q, 1.0 - q) * (g / n)
    return dpred, -dpred.sum(axis=-1)
