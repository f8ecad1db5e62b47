"""Differentiable operations on (batch, channel, z, y, x) tensors.

Convolutions are cross-correlations (no kernel flip) with zero padding
chosen to preserve spatial dims at stride 1. The 3-cubed path lowers to
a GEMM over a 27-slot column buffer built from contiguous slice copies;
its input gradient is again a convolution, with the spatially flipped,
channel-transposed kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, accumulate, result

NORM_EPS = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    dilation: int = 1

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.dilation not in (1, 2):
            raise ValueError(f"dilation must be 1 or 2, got {self.dilation}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def padding(self) -> int:
        # keeps spatial dims fixed at stride 1
        return self.dilation * (self.kernel - 1) // 2

    @property
    def taps(self) -> int:
        return self.kernel**3


def _conv_forward(xd: np.ndarray, wd: np.ndarray, spec: ConvSpec, save_cols: bool):
    """Correlate xd with wd; optionally keep the column buffer for dW."""
    b, cin, Z, Y, X = xd.shape
    cout = wd.shape[0]
    if spec.kernel == 1:
        cols2 = xd.reshape(b, cin, -1)
    else:
        d = spec.dilation
        p = spec.padding
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
        cols = np.empty((b, cin, 27, Z, Y, X), dtype=xd.dtype)
        i = 0
        for dz in range(3):
            for dy in range(3):
                for dx in range(3):
                    cols[:, :, i] = xp[:, :, dz * d : dz * d + Z, dy * d : dy * d + Y, dx * d : dx * d + X]
                    i += 1
        cols2 = cols.reshape(b, cin * 27, -1)
    w2 = wd.reshape(cout, cin * spec.taps)
    out = np.matmul(w2, cols2).reshape(b, cout, Z, Y, X)
    return out, (cols2 if save_cols else None)


def _conv_dx(g: np.ndarray, wd: np.ndarray, spec: ConvSpec) -> np.ndarray:
    flipped = np.flip(wd, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4)
    back = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel, spec.dilation)
    dx, _ = _conv_forward(g, np.ascontiguousarray(flipped), back, save_cols=False)
    return dx


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Same-size 3D cross-correlation with bias."""
    if x.ndim != 5:
        raise ValueError(f"conv3d input must have 5 axes, got {x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec wants {spec.in_channels}")
    wshape = (spec.out_channels, spec.in_channels) + (spec.kernel,) * 3
    if weight.shape != wshape:
        raise ValueError(f"weight shape {weight.shape} != {wshape}")
    if bias.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    out, cols2 = _conv_forward(x.data, weight.data, spec, save_cols=weight.requires_grad)
    out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        if bias.requires_grad:
            accumulate(bias, g.sum(axis=(0, 2, 3, 4)))
        if weight.requires_grad:
            g2 = g.reshape(g.shape[0], g.shape[1], -1)
            dw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
            accumulate(weight, dw.reshape(weight.shape))
        if x.requires_grad:
            accumulate(x, _conv_dx(g, weight.data, spec))

    return result(out, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        accumulate(x, g * (x.data > 0))

    return result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        accumulate(x, g * out * (1.0 - out))

    return result(out, (x,), backward)


def default_groups(channels: int) -> int:
    """Largest divisor of the channel count that is at most 8."""
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def _norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    b, c = x.shape[:2]
    if c % groups != 0:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"affine params must have shape ({c},)")
    gshape = (b, groups, c // groups) + x.shape[2:]
    axes = (2, 3, 4, 5)
    xg = x.data.reshape(gshape)
    mu = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    xhat_c = xhat.reshape(x.shape)
    out = gamma.data.reshape(1, c, 1, 1, 1) * xhat_c + beta.data.reshape(1, c, 1, 1, 1)

    def backward(g):
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat_c).sum(axis=(0, 2, 3, 4)))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            n = xhat[0, 0].size
            dxhat = (g * gamma.data.reshape(1, c, 1, 1, 1)).reshape(gshape)
            term = (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            accumulate(x, (inv / n * term).reshape(x.shape))

    return result(out, (x, gamma, beta), backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Standardize over (channels-within-group, z, y, x) per batch item."""
    return _norm(x, groups, gamma, beta, eps)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Standardize each (batch, channel) slice over its spatial axes."""
    return _norm(x, x.shape[1], gamma, beta, eps)


def maxpool3d(x: Tensor) -> Tensor:
    """2-cubed blockwise max with stride 2; gradient goes to the argmax.

    Ties route to the first voxel of the block in row-major (z, y, x)
    order.
    """
    b, c, Z, Y, X = x.shape
    if Z % 2 or Y % 2 or X % 2:
        raise ValueError(f"maxpool3d needs even spatial dims, got {(Z, Y, X)}")
    hz, hy, hx = Z // 2, Y // 2, X // 2
    blocks = (
        x.data.reshape(b, c, hz, 2, hy, 2, hx, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(b, c, hz, hy, hx, 8)
    )
    idx = blocks.argmax(axis=-1)  # first occurrence wins ties
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (
            gb.reshape(b, c, hz, hy, hx, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(x.shape)
        )
        accumulate(x, gx)

    return result(out, (x,), backward)


def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel convention: output j samples source at j/2 - 1/4, edge-clamped
    a = np.moveaxis(a, axis, -1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    left = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    right = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out[..., 0::2] = 0.75 * a + 0.25 * left
    out[..., 1::2] = 0.75 * a + 0.25 * right
    return np.moveaxis(out, -1, axis)


def _up1d_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    even = g[..., 0::2]
    odd = g[..., 1::2]
    y = 0.75 * (even + odd)
    y[..., :-1] += 0.25 * even[..., 1:]
    y[..., 1:] += 0.25 * odd[..., :-1]
    y[..., 0] += 0.25 * even[..., 0]
    y[..., -1] += 0.25 * odd[..., -1]
    return np.moveaxis(y, -1, axis)


def trilinear_upsample2x(x: Tensor) -> Tensor:
    """Double each spatial dim by separable linear interpolation."""
    out = x.data
    for axis in (2, 3, 4):
        out = _up1d(out, axis)

    def backward(g):
        for axis in (4, 3, 2):
            g = _up1d_adjoint(g, axis)
        accumulate(x, g)

    return result(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concat {a.shape} with {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        accumulate(a, g[:, :ca])
        accumulate(b, g[:, ca:])

    return result(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        accumulate(a, g)
        accumulate(b, g)

    return result(out, (a, b), backward)


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a 0-dim scalar; the usual root for backward passes."""
    out = np.asarray(x.data.sum())

    def backward(g):
        accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=True))

    return result(out, (x,), backward)
