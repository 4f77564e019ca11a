"""Composite layers: inverted residuals, channel-attention fusion, edge and decoder blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functional import bilinear_resize
from .nn import Conv2d, ConvBnRelu, Module
from .tensor import Tensor, concat, expand, global_avg_pool, mul, relu, sigmoid


@dataclass(frozen=True)
class IrbConfig:
    in_ch: int
    out_ch: int
    expansion: int = 4
    stride: int = 1
    dilation: int = 1

    @property
    def hidden(self) -> int:
        return self.expansion * self.in_ch

    @property
    def use_shortcut(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch


class InvertedResidual(Module):
    """Expand (1x1) -> depthwise 3x3 -> linear project (1x1), with identity shortcut.

    With ``expansion == 1`` the expand convolution is skipped, as in the
    first MobileNetV2 stage.
    """

    def __init__(self, cfg: IrbConfig, rng=None, dtype=np.float32):
        self.cfg = cfg
        hidden = cfg.hidden
        self.expand = ConvBnRelu(cfg.in_ch, hidden, 1, rng=rng, dtype=dtype) if cfg.expansion != 1 else None
        self.depthwise = ConvBnRelu(hidden, hidden, 3, stride=cfg.stride, dilation=cfg.dilation, groups=hidden,
                                    rng=rng, dtype=dtype)
        self.project = ConvBnRelu(hidden, cfg.out_ch, 1, activation=False, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.in_ch:
            raise ValueError(f"inverted residual expects {self.cfg.in_ch} channels, got {x.shape[1]}")
        y = self.expand(x) if self.expand is not None else x
        y = self.project(self.depthwise(y))
        return x + y if self.cfg.use_shortcut else y


class CAFF(Module):
    """Channel-attention fusion of a backbone feature and an edge feature of equal shape.

    The two inputs are concatenated and squeezed back to ``channels`` by a
    1x1 Conv-BN-ReLU; a pooled gate ``a`` (1x1 conv, ReLU, 1x1 conv,
    sigmoid) then scales both inputs, whose sum goes through a 3x3
    Conv-BN-ReLU.
    """

    def __init__(self, channels: int, reduction: int = 4, rng=None, dtype=np.float32):
        self.channels = channels
        squeezed = max(1, channels // reduction)
        self.reduce = ConvBnRelu(2 * channels, channels, 1, rng=rng, dtype=dtype)
        self.gate_down = Conv2d(channels, squeezed, 1, rng=rng, dtype=dtype)
        self.gate_up = Conv2d(squeezed, channels, 1, rng=rng, dtype=dtype)
        self.fuse = ConvBnRelu(channels, channels, 3, rng=rng, dtype=dtype)

    def attention(self, d: Tensor, e: Tensor) -> Tensor:
        z = self.reduce(concat([d, e], axis=1))
        return sigmoid(self.gate_up(relu(self.gate_down(global_avg_pool(z)))))

    def forward(self, d: Tensor, e: Tensor) -> Tensor:
        if d.shape != e.shape:
            raise ValueError(f"CAFF inputs must share a shape, got {d.shape} and {e.shape}")
        a = expand(self.attention(d, e), d.shape)
        return self.fuse(mul(a, d) + mul(a, e))


class EdgeCompact(Module):
    """Two 3x3 Conv-BN-ReLU layers (stride 2, then 1) on the 2-channel Sobel input."""

    def __init__(self, out_ch: int, in_ch: int = 2, rng=None, dtype=np.float32):
        self.down = ConvBnRelu(in_ch, out_ch, 3, stride=2, rng=rng, dtype=dtype)
        self.refine = ConvBnRelu(out_ch, out_ch, 3, rng=rng, dtype=dtype)

    def forward(self, g: Tensor) -> Tensor:
        h, w = g.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"edge compact module needs even spatial extents, got {h}x{w}")
        return self.refine(self.down(g))


class EdgeHead(Module):
    """3x3 Conv-BN-ReLU then a plain 3x3 conv to one logit channel."""

    def __init__(self, in_ch: int, hidden: int, rng=None, dtype=np.float32):
        self.body = ConvBnRelu(in_ch, hidden, 3, rng=rng, dtype=dtype)
        self.out = Conv2d(hidden, 1, 3, rng=rng, dtype=dtype)

    def forward(self, fc: Tensor) -> Tensor:
        return self.out(self.body(fc))

    def probabilities(self, fc: Tensor) -> Tensor:
        return sigmoid(self.forward(fc))


class DecoderBlock(Module):
    """concat(x, skips) -> 3x3 Conv-BN-ReLU -> bilinear x2."""

    def __init__(self, in_ch: int, out_ch: int, rng=None, dtype=np.float32):
        self.conv = ConvBnRelu(in_ch, out_ch, 3, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, skips: list[Tensor] = ()) -> Tensor:
        for s in skips:
            if s.shape[2:] != x.shape[2:]:
                raise ValueError(f"decoder skip spatial size {s.shape[2:]} != {x.shape[2:]}")
        y = self.conv(concat([x, *skips], axis=1))
        return bilinear_resize(y, scale=2)
