"""3D network primitives on 5-D tensors laid out as (batch, channel, z, y, x)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, mean, record, sqrt, square

_OFFSETS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


def _check_5d(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ValueError(f"{what} expects a 5-D (B, C, D, H, W) tensor, got shape {x.shape}")


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, D, H, W) -> (C*27, B*D*H*W) for a 3x3x3 kernel with zero padding 1."""
    b, c, d, h, w = x.shape
    xp = np.pad(x.transpose(1, 0, 2, 3, 4), ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((c, 27, b, d, h, w), dtype=x.dtype)
    for k, (i, j, l) in enumerate(_OFFSETS):
        cols[:, k] = xp[:, :, i : i + d, j : j + h, l : l + w]
    return cols.reshape(c * 27, b * d * h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    b, c, d, h, w = shape
    cols = cols.reshape(c, 27, b, d, h, w)
    xp = np.zeros((c, b, d + 2, h + 2, w + 2), dtype=cols.dtype)
    for k, (i, j, l) in enumerate(_OFFSETS):
        xp[:, :, i : i + d, j : j + h, l : l + w] += cols[:, k]
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1, 1:-1].transpose(1, 0, 2, 3, 4))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3x3 convolution, stride 1, zero padding 1 (spatial size preserved).

    Implemented as cross-correlation, the deep-learning convention.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_5d(x, "conv3d")
    if weight.ndim != 5 or weight.shape[2:] != (3, 3, 3):
        raise ValueError(f"conv3d weight must be (Cout, Cin, 3, 3, 3), got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input shape {x.shape} has {x.shape[1]} channels "
            f"but weight shape {weight.shape} expects {weight.shape[1]}"
        )
    b, _, d, h, w = x.shape
    cout = weight.shape[0]
    cols = _im2col(x.data)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv3d bias must have shape ({cout},), got {bias.shape}")
        out += bias.data[:, None]
        inputs = (x, weight, bias)
    out = np.ascontiguousarray(out.reshape(cout, b, d, h, w).transpose(1, 0, 2, 3, 4))

    def rule(g):
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(cout, -1)
        gx = _col2im(wmat.T @ g2, x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=1) if bias.requires_grad else None
        return gx, gw, gb

    return record("conv3d", inputs, out, rule)


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling with stride 2; ties go to the first voxel in scan order."""
    x = as_tensor(x)
    _check_5d(x, "maxpool3d")
    b, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"maxpool3d needs even spatial extents, got {x.shape[2:]}")
    win = (
        x.data.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(b, c, d // 2, h // 2, w // 2, 8)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros(win.shape, dtype=win.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(b, c, d // 2, h // 2, w // 2, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(x.shape)
        )
        return (gx,)

    return record("maxpool3d", (x,), out, rule)


def upsample_nearest3d(x: Tensor) -> Tensor:
    """Replicate every voxel into a 2x2x2 block."""
    x = as_tensor(x)
    _check_5d(x, "upsample_nearest3d")
    b, c, d, h, w = x.shape
    out = np.broadcast_to(
        x.data[:, :, :, None, :, None, :, None], (b, c, d, 2, h, 2, w, 2)
    ).reshape(b, c, 2 * d, 2 * h, 2 * w)

    def rule(g):
        return (g.reshape(b, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)

    return record("upsample_nearest3d", (x,), out, rule)


def channel_stats(x: Tensor, eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Per-(batch, channel) mean and sqrt(population variance + eps)."""
    x = as_tensor(x)
    _check_5d(x, "channel_stats")
    axes = (2, 3, 4)
    mu = mean(x, axis=axes)
    centered = x - mu.reshape(mu.shape + (1, 1, 1))
    var = mean(square(centered), axis=axes)
    return mu, sqrt(var + eps)


def _window_sum_axis(a: np.ndarray, k: int, axis: int) -> np.ndarray:
    return sliding_window_view(a, k, axis=axis).sum(axis=-1)


def box_sum3d(x: Tensor, size: int) -> Tensor:
    """Sum over every size^3 window fully inside the volume ("valid" mode)."""
    x = as_tensor(x)
    _check_5d(x, "box_sum3d")
    if min(x.shape[2:]) < size:
        raise ValueError(f"spatial size {x.shape[2:]} is smaller than window {size}")
    out = x.data
    for ax in (2, 3, 4):
        out = _window_sum_axis(out, size, ax)

    def rule(g):
        # adjoint of a valid window sum is a full window sum of the zero-padded gradient
        pad = size - 1
        for ax in (2, 3, 4):
            widths = [(0, 0)] * 5
            widths[ax] = (pad, pad)
            g = _window_sum_axis(np.pad(g, widths), size, ax)
        return (g,)

    return record("box_sum3d", (x,), np.ascontiguousarray(out), rule)
