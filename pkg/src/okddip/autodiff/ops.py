"""Differentiable operations.

Broadcasting is deliberately absent: elementwise ops demand equal shapes and
the only implicit expansion is :func:`bias_add` over the last axis.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_node

LOG_FLOOR = 1e-12


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    for t in tensors[1:]:
        _same_shape("add_n", tensors[0], t)
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        data = data + t.data
    return make_node(data, tensors, lambda g: tuple(g for _ in tensors))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """x[..., n] + b[n]."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: shape mismatch {x.shape} vs {b.shape}")
    axes = tuple(range(x.ndim - 1))
    return make_node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def channel_bias_add(x: Tensor, b: Tensor) -> Tensor:
    """x[B, C, H, W] + b[C]."""
    if x.ndim != 4 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"channel_bias_add: shape mismatch {x.shape} vs {b.shape}")
    return make_node(
        x.data + b.data[None, :, None, None], (x, b), lambda g: (g, g.sum(axis=(0, 2, 3)))
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for [n,k]@[k,j], [B,n,k]@[k,j] and [B,n,k]@[B,k,j]."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim in (2, 3) and b.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and b.ndim == 3:
        ok = a.ndim == 3 and a.shape[0] == b.shape[0]
    if not ok:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2 and ad.ndim == 3:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_node(ad @ bd, (a, b), back)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return make_node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_node(y, (x,), lambda g: (g * y,))


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped first (zero gradient below it)."""
    xd = x.data
    if floor is None:
        return make_node(np.log(xd), (x,), lambda g: (g / xd,))
    clamped = np.maximum(xd, floor)
    live = xd >= floor
    return make_node(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),))


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(out), (x,), back)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return make_node(out, (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    """Collapse everything but the leading batch axis."""
    return reshape(x, (x.shape[0], -1))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make_node(data, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        idx = [slice(None)] * len(shape)
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return make_node(np.take(x.data, index, axis=axis), (x,), back)


def pick(x: Tensor, labels: np.ndarray) -> Tensor:
    """Row-wise gather: out[i] = x[i, labels[i]]."""
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError(f"pick: shape mismatch {x.shape} vs labels {labels.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[rows, labels] = g
        return (full,)

    return make_node(x.data[rows, labels], (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), back)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 cross-correlation; x[B,C,H,W], w[O,C,k,k] -> [B,O,H',W']."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    k = w.shape[2]
    p = padding
    xd = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xd.shape[2] < k or xd.shape[3] < k:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xd.shape}")
    windows = sliding_window_view(xd, (k, k), axis=(2, 3))  # [B,C,H',W',k,k]
    wd = w.data
    out = np.einsum("bchwij,ocij->bohw", windows, wd, optimize=True)
    in_shape = x.shape

    def back(g):
        gw = np.einsum("bohw,bchwij->ocij", g, windows, optimize=True)
        gxp = np.zeros(xd.shape)
        ho, wo = g.shape[2], g.shape[3]
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + ho, j:j + wo] += np.einsum("bohw,oc->bchw", g, wd[:, :, i, j])
        gx = gxp[:, :, p:p + in_shape[2], p:p + in_shape[3]] if p else gxp
        return gx, gw

    y = make_node(out, (x, w), back)
    return channel_bias_add(y, b) if b is not None else y


def maxpool2x2(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2: needs [B,C,H,W] with even H, W, got {x.shape}")
    B, C, H, W = x.shape
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(B, C, H // 2, W // 2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(B, C, H, W),)

    return make_node(out, (x,), back)
