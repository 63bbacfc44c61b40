"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects (plain arrays and
scalars are wrapped as constants) and records itself on the active tape.
Image tensors use NHWC layout.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, as_tensor, record

ArrayLike = Union[Tensor, np.ndarray, float, int]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# -- elementwise -----------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return record("add", (a, b), out, back)


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return record("subtract", (a, b), out, back)


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def back(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return record("multiply", (a, b), out, back)


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return record("relu", (x,), np.where(pos, x.data, 0.0), lambda g, needs: (g * pos,))


def leaky_relu(x: ArrayLike, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return record("leaky_relu", (x,), x.data * scale, lambda g, needs: (g * scale,))


# -- shape -----------------------------------------------------------------

def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return record("reshape", (x,), out, lambda g, needs: (g.reshape(x.shape),))


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return record("transpose", (x,), x.data.transpose(axes), lambda g, needs: (g.transpose(inv),))


# -- reductions ------------------------------------------------------------

def sum(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    if axis is not None:
        axis = _axis(axis, x.ndim)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return record("sum", (x,), out, back)


def mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _axis(axis, x.ndim)
    n = x.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def back(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)

    return record("mean", (x,), out, back)


# -- linear algebra --------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of a rank-2 (or batched) left operand with a rank-2 right operand."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = a.data @ b.data

    def back(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = None
        if needs[1]:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return record("matmul", (a, b), out, back)


# -- softmax family --------------------------------------------------------

def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis(axis, x.ndim)
    p = np.exp(_log_softmax(x.data, axis))

    def back(g, needs):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), p, back)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis(axis, x.ndim)
    ls = _log_softmax(x.data, axis)

    def back(g, needs):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", (x,), ls, back)


def cross_entropy(logits: ArrayLike, target, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy along the last axis.

    ``target`` is either a probability distribution with the same shape as
    ``logits`` (soft labels) or an integer array of class indices with the
    leading shape of ``logits``. ``reduction`` is "mean" over all leading
    positions, "sum", or "none".
    """
    logits = as_tensor(logits)
    z = logits.data
    ls = _log_softmax(z, -1)
    if isinstance(target, Tensor):
        target = target.data
    target = np.asarray(target)
    if np.issubdtype(target.dtype, np.integer):
        if target.shape != z.shape[:-1]:
            raise DimensionError(f"label shape {target.shape} does not match logits {z.shape}")
        if target.size and (target.min() < 0 or target.max() >= z.shape[-1]):
            raise DimensionError("class index out of range")
        idx = target[..., None]
        per = -np.take_along_axis(ls, idx, axis=-1)[..., 0]
        dense = None
    else:
        if target.shape != z.shape:
            raise DimensionError(f"target shape {target.shape} does not match logits {z.shape}")
        dense = target.astype(np.float64)
        per = -(dense * ls).sum(axis=-1)
        idx = None
    n = per.size
    if reduction == "mean":
        out, scale = per.mean(), 1.0 / max(n, 1)
    elif reduction == "sum":
        out, scale = per.sum(), 1.0
    elif reduction == "none":
        out, scale = per, None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g, needs):
        p = np.exp(ls)
        gs = g[..., None] if scale is None else g * scale
        if dense is None:
            grad = p
            np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=-1) - 1.0, axis=-1)
        else:
            grad = p * dense.sum(axis=-1, keepdims=True) - dense
        return (grad * gs,)

    return record("cross_entropy", (logits,), np.asarray(out), back)


# -- spatial ---------------------------------------------------------------

def _same_pads(size: int, k: int, stride: int) -> tuple:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: ArrayLike, kernel: ArrayLike, mask: Optional[ArrayLike] = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of an NHWC input with a (kh, kw, Cin, Cout) kernel.

    ``mask`` (same shape as the kernel, entries 0/1) is multiplied into the
    kernel; taps whose mask is entirely zero are skipped.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 input and kernel, got {x.shape}, {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"kernel expects {kcin} input channels, input has {cin}")
    if stride < 1:
        raise DimensionError("stride must be positive")
    m = None
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        if m.shape != kernel.shape:
            raise DimensionError(f"mask shape {m.shape} differs from kernel shape {kernel.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise DimensionError("mask entries must be 0 or 1")
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise DimensionError(f"unknown padding {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise DimensionError("kernel larger than padded input")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    keff = kernel.data if m is None else kernel.data * m
    if m is None:
        taps = [(a, b) for a in range(kh) for b in range(kw)]
    else:
        taps = [(a, b) for a in range(kh) for b in range(kw) if m[a, b].any()]

    xp = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (pt, pb), (pl, pr), (0, 0)))

    def window(a, b):
        return xp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride, :]

    rows = n * ho * wo
    if taps:
        cols = np.concatenate([window(a, b) for a, b in taps], axis=-1).reshape(rows, len(taps) * cin)
        kflat = np.concatenate([keff[a, b] for a, b in taps], axis=0)
        out = (cols @ kflat).reshape(n, ho, wo, cout)
    else:
        cols = kflat = None
        out = np.zeros((n, ho, wo, cout))

    def back(g, needs):
        gx = gk = None
        if not taps:
            return (np.zeros(x.shape) if needs[0] else None,
                    np.zeros(kernel.shape) if needs[1] else None)
        g2 = g.reshape(rows, cout)
        if needs[1]:
            gflat = cols.T @ g2
            gk = np.zeros(kernel.shape)
            for t, (a, b) in enumerate(taps):
                gk[a, b] = gflat[t * cin:(t + 1) * cin]
            if m is not None:
                gk *= m
        if needs[0]:
            gcols = (g2 @ kflat.T).reshape(n, ho, wo, len(taps) * cin)
            gxp = np.zeros((n, hp, wp, cin))
            for t, (a, b) in enumerate(taps):
                gxp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride, :] += \
                    gcols[..., t * cin:(t + 1) * cin]
            gx = gxp[:, pt:pt + h, pl:pl + w, :]
        return gx, gk

    return record("conv2d", (x, kernel), out, back)


def max_pool2d(x: ArrayLike, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over NHWC spatial dims (ties go to the first element)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects rank 4, got {x.shape}")
    n, h, w, c = x.shape
    if h % size or w % size:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by pool size {size}")
    blocks = x.data.reshape(n, h // size, size, w // size, size, c).transpose(0, 1, 3, 5, 2, 4)
    flat = blocks.reshape(n, h // size, w // size, c, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g, needs):
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, h // size, w // size, c, size, size).transpose(0, 1, 4, 2, 5, 3)
        return (gx.reshape(x.shape),)

    return record("max_pool2d", (x,), out, back)


def _reflect_index(size: int, before: int, after: int) -> np.ndarray:
    if size == 1 and (before or after):
        raise DimensionError("cannot reflect-pad a dimension of size 1")
    idx = np.arange(-before, size + after)
    period = 2 * (size - 1)
    idx = np.abs(idx) % period if period else idx
    return np.where(idx >= size, period - idx, idx)


def pad_reflect(x: ArrayLike, pads: Sequence[tuple]) -> Tensor:
    """Reflective padding (edge sample not repeated) of NHWC spatial dims.

    ``pads`` is ((top, bottom), (left, right)).
    """
    x = as_tensor(x)
    if x.ndim != 4 or len(pads) != 2:
        raise DimensionError("pad_reflect expects NHWC input and two (before, after) pairs")
    (pt, pb), (pl, pr) = pads
    ih = _reflect_index(x.shape[1], pt, pb)
    iw = _reflect_index(x.shape[2], pl, pr)
    out = x.data[:, ih][:, :, iw]

    def back(g, needs):
        gh = np.zeros((g.shape[0], x.shape[1], g.shape[2], g.shape[3]))
        np.add.at(gh, (slice(None), ih), g)
        gx = np.zeros(x.shape)
        np.add.at(gx, (slice(None), slice(None), iw), gh)
        return (gx,)

    return record("pad_reflect", (x,), out, back)
