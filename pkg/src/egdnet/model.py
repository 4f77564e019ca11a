"""EGD-Net assembly: multi-scale extractor, edge guidance branch, aggregator, decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import TRFA, AttentionConfig
from .blocks import CAFF, DecoderBlock, EdgeCompact, EdgeHead, InvertedResidual, IrbConfig
from .data import sobel
from .functional import bilinear_resize
from .nn import Conv2d, ConvBnRelu, Module, count_params
from .tensor import Tensor, _sigmoid, concat, no_grad

MOBILENET_V2_STAGES = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2))


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 240
    input_width: int = 320
    stem_width: int = 32
    # per stage: (expansion, out_ch, repeats, stride)
    backbone_stages: tuple[tuple[int, int, int, int], ...] = MOBILENET_V2_STAGES
    extension_dilations: tuple[int, ...] = (1, 2, 3, 1, 2, 3)
    extension_width: int = 128
    extension_expansion: int = 4
    fc_width: int = 32
    edge_head_width: int = 32
    decoder_widths: tuple[int, ...] = (64, 64, 32, 24)
    attention_heads: int = 4
    caff_reduction: int = 4
    depth_min: float = 0.1
    depth_max: float = 10.0

    def __post_init__(self):
        if self.input_height % 16 or self.input_width % 16:
            raise ValueError(f"input size {self.input_height}x{self.input_width} must be divisible by 16")
        if len(self.extension_dilations) != 6:
            raise ValueError("extension_dilations must list six rates")
        if len(self.backbone_stages) != 4:
            raise ValueError("backbone_stages must describe four stages")
        strides = [s[3] for s in self.backbone_stages]
        if strides != [1, 2, 2, 2]:
            raise ValueError(f"backbone stage strides must be 1,2,2,2 to reach 1/16, got {strides}")
        if len(self.decoder_widths) != 4:
            raise ValueError("decoder_widths must have four entries (entry conv + three blocks)")
        if self.depth_min <= 0 or self.depth_max <= self.depth_min:
            raise ValueError("need 0 < depth_min < depth_max")
        AttentionConfig(self.extension_width, self.attention_heads)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.extension_width, self.attention_heads)

    @property
    def level_widths(self) -> tuple[int, int, int, int]:
        """Widths of D1..D4 (and of the fused edge features E1/E2..E5)."""
        s = self.backbone_stages
        return (self.stem_width, s[1][1], s[2][1], s[3][1])


@dataclass
class FeaturePyramid:
    d1: Tensor
    d2: Tensor
    d3: Tensor
    d4: Tensor
    d5: Tensor


@dataclass
class EdgeFeatures:
    e1: Tensor
    e2: Tensor
    e3: Tensor
    e4: Tensor
    e5: Tensor
    e6: Tensor
    fc: Tensor


class EGDNet(Module):
    def __init__(self, config: ModelConfig | None = None, rng=None, dtype=np.float32):
        cfg = config or ModelConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = cfg
        widths = cfg.level_widths

        # multi-scale feature extractor
        self.stem = ConvBnRelu(3, cfg.stem_width, 3, stride=2, rng=rng, dtype=dtype)
        backbone, taps, ch = [], [], cfg.stem_width
        for expansion, out_ch, repeats, stride in cfg.backbone_stages:
            for i in range(repeats):
                irb = IrbConfig(ch, out_ch, expansion, stride if i == 0 else 1, 1)
                backbone.append(InvertedResidual(irb, rng, dtype))
                ch = out_ch
            taps.append(len(backbone) - 1)
        self.backbone = backbone
        self._taps = taps[1:]  # ends of stages 2..4 give D2..D4; the stem gives D1
        self.widen = ConvBnRelu(ch, cfg.extension_width, 1, rng=rng, dtype=dtype)
        self.extension = [
            InvertedResidual(IrbConfig(cfg.extension_width, cfg.extension_width, cfg.extension_expansion, 1, d),
                             rng, dtype)
            for d in cfg.extension_dilations
        ]

        # edge guidance branch
        self.edge_compact = EdgeCompact(widths[0], rng=rng, dtype=dtype)
        self.caff = [CAFF(w, cfg.caff_reduction, rng, dtype) for w in widths]
        self.edge_down = [ConvBnRelu(widths[i], widths[i + 1], 3, stride=2, rng=rng, dtype=dtype) for i in range(3)]
        self.edge_top = ConvBnRelu(widths[3], cfg.extension_width, 3, rng=rng, dtype=dtype)
        self.fc = ConvBnRelu(sum(widths), cfg.fc_width, 3, rng=rng, dtype=dtype)
        self.edge_head = EdgeHead(cfg.fc_width, cfg.edge_head_width, rng, dtype)

        self.trfa = TRFA(cfg.attention, rng, dtype)

        dec = cfg.decoder_widths
        self.decoder_entry = ConvBnRelu(cfg.extension_width, dec[0], 3, rng=rng, dtype=dtype)
        self.decoder_blocks = [
            DecoderBlock(dec[0] + widths[2], dec[1], rng, dtype),
            DecoderBlock(dec[1] + widths[1], dec[2], rng, dtype),
            DecoderBlock(dec[2] + widths[0] + cfg.fc_width, dec[3], rng, dtype),
        ]
        self.depth_head = Conv2d(dec[3], 1, 3, rng=rng, dtype=dtype)

    # ------------------------------------------------------------------ stages
    def _check_input(self, rgb: Tensor) -> None:
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise ValueError(f"expected an (N, 3, H, W) image batch, got {rgb.shape}")
        h, w = rgb.shape[2:]
        if h % 16 or w % 16:
            raise ValueError(f"input size {h}x{w} must be divisible by 16")

    def msfe(self, rgb: Tensor) -> FeaturePyramid:
        self._check_input(rgb)
        x = self.stem(rgb)
        feats = [x]
        for i, block in enumerate(self.backbone):
            x = block(x)
            if i in self._taps:
                feats.append(x)
        x = self.widen(x)
        for block in self.extension:
            x = block(x)
        return FeaturePyramid(*feats, x)

    def egb(self, gradients: Tensor, p: FeaturePyramid) -> EdgeFeatures:
        if gradients.ndim != 4 or gradients.shape[1] != 2:
            raise ValueError(f"expected (N, 2, H, W) image gradients, got {gradients.shape}")
        e1 = self.edge_compact(gradients)
        e2 = self.caff[0](p.d1, e1)
        e3 = self.caff[1](p.d2, self.edge_down[0](e2))
        e4 = self.caff[2](p.d3, self.edge_down[1](e3))
        e5 = self.caff[3](p.d4, self.edge_down[2](e4))
        e6 = self.edge_top(e5)
        half = e2.shape[2:]
        stacked = concat([e2] + [bilinear_resize(e, half) for e in (e3, e4, e5)], axis=1)
        return EdgeFeatures(e1, e2, e3, e4, e5, e6, self.fc(stacked))

    def decode(self, fa: Tensor, fc: Tensor, d1: Tensor, d2: Tensor, d3: Tensor) -> Tensor:
        x = self.decoder_entry(bilinear_resize(fa, scale=2))
        x = self.decoder_blocks[0](x, [d3])
        x = self.decoder_blocks[1](x, [d2])
        x = self.decoder_blocks[2](x, [d1, fc])
        return self.depth_head(x)

    def forward_features(self, rgb: Tensor, gradients: Tensor | None = None) -> dict[str, Tensor]:
        """Run the whole network and return every named intermediate."""
        self._check_input(rgb)
        if gradients is None:
            gradients = Tensor(sobel(rgb.data))
        p = self.msfe(rgb)
        e = self.egb(gradients, p)
        fa = self.trfa(p.d5, e.e6)
        depth = self.decode(fa, e.fc, p.d1, p.d2, p.d3)
        edge = self.edge_head(e.fc)
        feats = {f"D{i + 1}": t for i, t in enumerate((p.d1, p.d2, p.d3, p.d4, p.d5))}
        feats.update({f"E{i + 1}": t for i, t in enumerate((e.e1, e.e2, e.e3, e.e4, e.e5, e.e6))})
        feats.update(Fc=e.fc, Fa=fa, depth=depth, edge=edge)
        return feats

    def forward(self, rgb: Tensor, gradients: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Returns (depth (N,1,H,W), edge logits (N,1,H/2,W/2))."""
        f = self.forward_features(rgb, gradients)
        return f["depth"], f["edge"]

    def predict(self, rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode inference: clamped depth in meters and edge probabilities."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                dtype = self.stem.conv.weight.dtype
                depth, edge = self.forward(Tensor(np.asarray(rgb, dtype=dtype)))
        finally:
            self.train(was_training)
        d = np.clip(depth.data, self.config.depth_min, self.config.depth_max)
        return d, _sigmoid(edge.data.astype(np.float64))

    def num_params(self) -> int:
        return count_params(self)
