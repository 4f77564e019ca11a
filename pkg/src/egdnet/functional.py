"""Convolution, normalization, resampling and loss primitives.

Each op here has a hand-written backward rule; all of them are covered by
finite-difference checks in the test suite.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _sigmoid, expand, make_result, matmul, mean, mul, reshape, sub

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _check_conv_args(x, weight, bias, stride, padding, dilation, groups):
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise ValueError(f"conv2d: bad stride/padding/dilation/groups {stride}/{padding}/{dilation}/{groups}")
    n, c, h, w = x.shape
    out_ch, cg, kh, kw = weight.shape
    if c % groups or out_ch % groups:
        raise ValueError(f"conv2d: channels in={c} out={out_ch} not divisible by groups={groups}")
    if cg != c // groups:
        raise ValueError(f"conv2d: weight expects {cg} channels per group, input gives {c // groups}")
    if bias is not None and bias.shape != (out_ch,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({out_ch},)")
    if x.dtype != weight.dtype or (bias is not None and bias.dtype != x.dtype):
        raise ValueError("conv2d: operand dtypes differ")
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: zero-sized output for input {x.shape} and kernel {weight.shape}")
    return oh, ow


def _im2col(xp: np.ndarray, kh, kw, oh, ow, stride, dilation) -> np.ndarray:
    """Padded (N,C,Hp,Wp) -> columns laid out as (C, kh, kw, N, oh, ow)."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, i, j] = xt[:, :, r0 : r0 + stride * (oh - 1) + 1 : stride, c0 : c0 + stride * (ow - 1) + 1 : stride]
    return cols


def _col2im(cols: np.ndarray, padded_shape, kh, kw, oh, ow, stride, dilation) -> np.ndarray:
    n, c, hp, wp = padded_shape
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0 : r0 + stride * (oh - 1) + 1 : stride, c0 : c0 + stride * (ow - 1) + 1 : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-d cross-correlation (deep-learning convention) via im2col + matmul."""
    oh, ow = _check_conv_args(x, weight, bias, stride, padding, dilation, groups)
    n, c, h, w = x.shape
    out_ch, cg, kh, kw = weight.shape
    og = out_ch // groups
    k = cg * kh * kw
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, oh, ow, stride, dilation).reshape(groups, k, n * oh * ow)
    wmat = weight.data.reshape(groups, og, k)
    out = np.matmul(wmat, cols).reshape(out_ch, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    padded_shape = xp.shape

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(groups, og, n * oh * ow)
        gw = np.matmul(gt, cols.transpose(0, 2, 1)).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.transpose(0, 2, 1), gt).reshape(c, kh, kw, n, oh, ow)
            gxp = _col2im(gcols, padded_shape, kh, kw, oh, ow, stride, dilation)
            gx = np.ascontiguousarray(gxp[:, :, p : p + h, p : p + w])
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward)


def conv2d_naive(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> np.ndarray:
    """Loop-level reference convolution (forward only).

    Accumulates over (input channel, kernel row, kernel column) in that order
    for each output element, starting from the bias.
    """
    xt, wt = Tensor(x), Tensor(weight)
    bt = None if bias is None else Tensor(bias)
    oh, ow = _check_conv_args(xt, wt, bt, stride, padding, dilation, groups)
    n, c, h, w = x.shape
    out_ch, cg, kh, kw = weight.shape
    og = out_ch // groups
    out = np.zeros((n, out_ch, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(out_ch):
            g = o // og
            for y in range(oh):
                for xx in range(ow):
                    acc = x.dtype.type(0) if bias is None else bias[o]
                    for ci in range(cg):
                        src_c = g * cg + ci
                        for i in range(kh):
                            r = y * stride - padding + i * dilation
                            if r < 0 or r >= h:
                                continue
                            for j in range(kw):
                                col = xx * stride - padding + j * dilation
                                if col < 0 or col >= w:
                                    continue
                                acc = acc + weight[o, ci, i, j] * x[b, src_c, r, col]
                    out[b, o, y, xx] = acc
    return out


class BatchNormState:
    """Running statistics for one batch-norm layer (mutated in train mode)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"batch_norm: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", state.running_mean),
                       ("running_var", state.running_var)):
        if arr.shape != (c,):
            raise ValueError(f"batch_norm: {label} has shape {arr.shape}, input has {c} channels")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    bd = beta.data[None, :, None, None]
    dt = xd.dtype.type
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        centered = xd - mu[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1 / np.sqrt(var + dt(eps))
        xhat = centered * inv_std[None, :, None, None]
        mom = dt(momentum)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu.astype(state.running_mean.dtype)
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased.astype(state.running_var.dtype)

        def backward(g):
            dxhat = g * gd
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv_std = 1 / np.sqrt(state.running_var.astype(xd.dtype) + dt(eps))
        xhat = (xd - state.running_mean.astype(xd.dtype)[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            gx = g * gd * inv_std[None, :, None, None]
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = gd * xhat + bd
    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def _interp_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """Rows of bilinear weights (align_corners=False) mapping ``src`` samples to ``dst``."""
    mat = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        pos = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(pos)), src - 1)
        i1 = min(i0 + 1, src - 1)
        frac = pos - i0
        mat[i, i0] += 1 - frac
        mat[i, i1] += frac
    return mat.astype(dtype)


def resize_array(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the last two axes of a plain array."""
    oh, ow = size
    h, w = x.shape[-2:]
    if (oh, ow) == (h, w):
        return x.copy()
    ah = _interp_matrix(h, oh, x.dtype)
    aw = _interp_matrix(w, ow, x.dtype)
    return np.matmul(np.matmul(ah, x), aw.T)


def bilinear_resize(x: Tensor, size: tuple[int, int] | None = None, scale: float | None = None) -> Tensor:
    """Bilinear interpolation, align_corners=False semantics."""
    if x.ndim != 4:
        raise ValueError(f"bilinear_resize: expected NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError("bilinear_resize: give a positive scale or a target size")
        size = (int(np.floor(h * scale)), int(np.floor(w * scale)))
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"bilinear_resize: non-positive target size {size}")
    if (oh, ow) == (h, w):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    ah = _interp_matrix(h, oh, x.dtype)
    aw = _interp_matrix(w, ow, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return make_result(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` over the last axis; weight is (in, out)."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, weight)
    if bias is not None:
        out = out + expand(reshape(bias, (1, -1)), out.shape)
    return reshape(out, lead + (weight.shape[1],))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, composed from differentiable primitives."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: affine params must have shape ({d},)")
    mu = expand(mean(x, axis=-1, keepdims=True), x.shape)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = expand((var + eps) ** -0.5, x.shape)
    lead = (1,) * (x.ndim - 1)
    g = expand(reshape(gamma, lead + (d,)), x.shape)
    b = expand(reshape(beta, lead + (d,)), x.shape)
    return mul(mul(centered, inv), g) + b


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.

    Uses max(x, 0) - x*t + log1p(exp(-|x|)), which never overflows.
    """
    target = np.asarray(target)
    if target.shape != logits.shape:
        raise ValueError(f"bce_with_logits: target shape {target.shape} != logits shape {logits.shape}")
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("bce_with_logits: targets must be 0 or 1")
    xd = logits.data
    t = target.astype(xd.dtype)
    per_pixel = np.maximum(xd, 0) - xd * t + np.log1p(np.exp(-np.abs(xd)))
    count = xd.size
    out = np.asarray(per_pixel.sum() / count, dtype=xd.dtype)

    def backward(g):
        return (g * (_sigmoid(xd) - t) / count,)

    return make_result(out, (logits,), backward)
