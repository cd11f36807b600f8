"""Scan kernels for diagonal linear recurrences.

The recurrence ``s_k = a_k * s_{k-1} + b_k`` (elementwise, complex) is a fold
over the associative operator ``(a1, b1) . (a2, b2) = (a2*a1, a2*b1 + b2)``.
``parallel_scan`` evaluates every prefix of that fold with a Brent-Kung tree
over a power-of-two padded time axis, so the reduction order (and therefore
the rounding) depends only on the padded length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not line up."""


@dataclass(frozen=True)
class ComplexVec:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=np.float64)
        im = np.asarray(self.im, dtype=np.float64)
        if re.shape != im.shape:
            raise DimensionError(f"re/im shape mismatch: {re.shape} vs {im.shape}")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def from_complex(cls, z) -> "ComplexVec":
        z = np.asarray(z, dtype=np.complex128)
        return cls(z.real.copy(), z.imag.copy())

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def __len__(self) -> int:
        return len(self.re)


@dataclass(frozen=True)
class ScanElement:
    a: ComplexVec
    b: ComplexVec

    def __post_init__(self):
        if len(self.a) != len(self.b):
            raise DimensionError(f"transition length {len(self.a)} != input length {len(self.b)}")


def _cmul(ar, ai, br, bi):
    return ar * br - ai * bi, ar * bi + ai * br


def scan_op(left: ScanElement, right: ScanElement) -> ScanElement:
    """Compose ``left`` (earlier) with ``right`` (later)."""
    if len(left.a) != len(right.a):
        raise DimensionError(f"cannot compose lengths {len(left.a)} and {len(right.a)}")
    ar, ai = _cmul(right.a.re, right.a.im, left.a.re, left.a.im)
    br, bi = _cmul(right.a.re, right.a.im, left.b.re, left.b.im)
    return ScanElement(ComplexVec(ar, ai), ComplexVec(br + right.b.re, bi + right.b.im))


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def scan_arrays(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    """Inclusive scan of ``s_k = a_k s_{k-1} + b_k`` along ``axis`` with ``s_0 = 0``.

    ``a`` must broadcast against ``b``; pass a transition without the time axis
    (e.g. shape ``(P,)`` for ``b`` of shape ``(L, P)``) for time-invariant
    dynamics. Works for real or complex dtypes.
    """
    b = np.asarray(b)
    a = np.asarray(a)
    if b.ndim == 0:
        raise DimensionError("b needs a time axis")
    axis = axis % b.ndim
    n = b.shape[axis]
    if n == 0:
        return b.copy()
    dtype = np.result_type(a, b)
    bt = np.moveaxis(b, axis, 0)
    if a.ndim == b.ndim:
        at = np.moveaxis(a, axis, 0)
    else:
        at = a[np.newaxis]
    size = _next_pow2(n)
    xs = np.zeros((size,) + bt.shape[1:], dtype=dtype)
    xs[:n] = bt
    A = np.ones((size,) + np.broadcast_shapes(at.shape[1:], bt.shape[1:]), dtype=dtype)
    A[:n] = np.broadcast_to(at, (n,) + A.shape[1:])

    # up-sweep: node k (1-based multiple of 2*step) absorbs node k-step
    step = 1
    while step < size:
        r = slice(2 * step - 1, size, 2 * step)
        l = slice(step - 1, size, 2 * step)
        xs[r] = A[r] * xs[l] + xs[r]
        A[r] = A[r] * A[l]
        step *= 2
    # down-sweep: fill the remaining prefixes from already-complete ones
    step = size // 4
    while step >= 1:
        r = slice(3 * step - 1, size, 2 * step)
        l = slice(2 * step - 1, size - step, 2 * step)
        xs[r] = A[r] * xs[l] + xs[r]
        A[r] = A[r] * A[l]
        step //= 2
    return np.moveaxis(xs[:n], 0, axis)


def sequential_scan(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    """Reference loop for :func:`scan_arrays`."""
    b = np.moveaxis(np.asarray(b), axis % np.ndim(b), 0)
    a = np.asarray(a)
    at = np.moveaxis(a, axis % np.ndim(b), 0) if a.ndim == b.ndim else None
    out = np.zeros(b.shape, dtype=np.result_type(a, b))
    s = np.zeros(b.shape[1:], dtype=out.dtype)
    for k in range(b.shape[0]):
        s = (at[k] if at is not None else a) * s + b[k]
        out[k] = s
    return np.moveaxis(out, 0, axis % np.ndim(b))


def parallel_scan(elements: Sequence[ScanElement]) -> list[ComplexVec]:
    """States ``s_1..s_L`` for a sequence of scan elements, starting from zero."""
    if len(elements) == 0:
        return []
    width = len(elements[0].a)
    for e in elements:
        if len(e.a) != width:
            raise DimensionError("all scan elements must share one state width")
    a = np.stack([e.a.to_complex() for e in elements])
    b = np.stack([e.b.to_complex() for e in elements])
    states = scan_arrays(a, b, axis=0)
    return [ComplexVec.from_complex(s) for s in states]


def cumulative_sum(x) -> np.ndarray:
    return np.cumsum(np.asarray(x, dtype=np.float64))
