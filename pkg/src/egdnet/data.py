"""Image operators, edge targets, augmentation, synthetic scenes, and dataset files.

Everything here works on plain numpy arrays; none of it is differentiated.
Image arrays are channel-first: rgb (3, H, W) in [0, 1], depth (1, H, W) in
meters, and a boolean validity mask (1, H, W).
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .functional import resize_array

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()
LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
LUMA = (0.299, 0.587, 0.114)

DEFAULT_EDGE_THRESHOLD = 0.25
DPT_MAGIC = b"DPT1"


class DatasetError(ValueError):
    """A dataset file is missing, malformed, or inconsistent with its pair."""


@dataclass
class DepthSample:
    rgb: np.ndarray
    depth: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = self.depth > 0
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"rgb must be (3, H, W), got {self.rgb.shape}")
        if self.depth.shape != (1,) + self.rgb.shape[1:]:
            raise ValueError(f"depth shape {self.depth.shape} does not match rgb {self.rgb.shape}")
        if self.valid.shape != self.depth.shape:
            raise ValueError(f"mask shape {self.valid.shape} does not match depth {self.depth.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_range: tuple[float, float] = (-5.0, 5.0)
    jitter_range: tuple[float, float] = (0.6, 1.4)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(0.0, (0.0, 0.0), (1.0, 1.0))


# ------------------------------------------------------------------ operators
def _correlate3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation over the last two axes with replicate padding."""
    pad = [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(img, pad, mode="edge")
    h, w = img.shape[-2:]
    out = np.zeros(img.shape, dtype=np.float64)
    for i in range(3):
        for j in range(3):
            if kernel[i, j]:
                out += kernel[i, j] * p[..., i : i + h, j : j + w]
    return out


def grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luminance of (..., 3, H, W) -> (..., H, W)."""
    return LUMA[0] * rgb[..., 0, :, :] + LUMA[1] * rgb[..., 1, :, :] + LUMA[2] * rgb[..., 2, :, :]


def sobel(rgb: np.ndarray) -> np.ndarray:
    """(N, 3, H, W) image batch -> (N, 2, H, W) luminance gradients (x, y)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ValueError(f"sobel expects an (N, 3, H, W) batch, got {rgb.shape}")
    y = grayscale(rgb.astype(np.float64))
    p = np.pad(y, [(0, 0), (1, 1), (1, 1)], mode="edge")
    # separable form: central difference, then [1, 2, 1] smoothing across it.
    # Differencing first keeps flat regions at exactly zero.
    dx = p[:, :, 2:] - p[:, :, :-2]
    dy = p[:, 2:, :] - p[:, :-2, :]
    gx = dx[:, :-2] + 2.0 * dx[:, 1:-1] + dx[:, 2:]
    gy = dy[:, :, :-2] + 2.0 * dy[:, :, 1:-1] + dy[:, :, 2:]
    out = np.stack([gx, gy], axis=1)
    return out.astype(rgb.dtype if rgb.dtype in (np.float32, np.float64) else np.float32)


def laplacian_edges(depth: np.ndarray, threshold: float = DEFAULT_EDGE_THRESHOLD,
                    valid: np.ndarray | None = None) -> np.ndarray:
    """Binary edge map: |Laplacian(depth)| > threshold, zero near invalid pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim < 2:
        raise ValueError(f"depth must be at least 2-d, got {depth.shape}")
    valid = depth > 0 if valid is None else np.asarray(valid, dtype=bool)
    if valid.shape != depth.shape:
        raise ValueError(f"mask shape {valid.shape} does not match depth {depth.shape}")
    response = _correlate3(np.where(valid, depth, 0.0), LAPLACIAN)
    edges = np.abs(response) > threshold
    # a pixel is usable only if its whole 3x3 neighborhood is valid
    inv = _correlate3((~valid).astype(np.float64), np.ones((3, 3))) > 0
    return (edges & ~inv).astype(np.float32)


def make_edge_target(depth: np.ndarray, threshold: float = DEFAULT_EDGE_THRESHOLD,
                     valid: np.ndarray | None = None) -> np.ndarray:
    """Half-resolution binary edge labels from a full-resolution depth map."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"depth extents must be even, got {h}x{w}")
    valid = depth > 0 if valid is None else np.asarray(valid, dtype=bool)
    half = (h // 2, w // 2)
    small = resize_array(np.where(valid, depth, 0.0), half)
    small_valid = resize_array(valid.astype(np.float64), half) >= 1.0 - 1e-9
    return laplacian_edges(small, threshold, small_valid)


def make_edge_targets(depth: np.ndarray, valid: np.ndarray, threshold: float = DEFAULT_EDGE_THRESHOLD) -> np.ndarray:
    """Batched :func:`make_edge_target` over (N, 1, H, W)."""
    return np.stack([make_edge_target(d, threshold, v) for d, v in zip(depth, valid)])


# --------------------------------------------------------------- augmentation
def hflip(sample: DepthSample) -> DepthSample:
    return DepthSample(sample.rgb[..., ::-1].copy(), sample.depth[..., ::-1].copy(), sample.valid[..., ::-1].copy())


def rotate(sample: DepthSample, degrees: float) -> DepthSample:
    """Rotate about the image center; bilinear for rgb/depth, nearest for the mask.

    Pixels whose source falls outside the image, or whose bilinear footprint
    touches an invalid pixel, are marked invalid with depth 0.
    """
    h, w = sample.size
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sy = cos * (yy - cy) - sin * (xx - cx) + cy
    sx = sin * (yy - cy) + cos * (xx - cx) + cx
    inside = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)

    y0 = np.clip(np.floor(sy), 0, h - 1).astype(np.intp)
    x0 = np.clip(np.floor(sx), 0, w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(sy - y0, 0, 1)
    fx = np.clip(sx - x0, 0, 1)

    def bilinear(img):
        return ((1 - fy) * (1 - fx) * img[..., y0, x0] + (1 - fy) * fx * img[..., y0, x1]
                + fy * (1 - fx) * img[..., y1, x0] + fy * fx * img[..., y1, x1])

    ny = np.clip(np.rint(sy), 0, h - 1).astype(np.intp)
    nx = np.clip(np.rint(sx), 0, w - 1).astype(np.intp)
    m = sample.valid[0]
    footprint = (
        (m[y0, x0] | ((1 - fy) * (1 - fx) == 0)) & (m[y0, x1] | ((1 - fy) * fx == 0))
        & (m[y1, x0] | (fy * (1 - fx) == 0)) & (m[y1, x1] | (fy * fx == 0))
    )
    valid = (inside & m[ny, nx] & footprint)[None]
    rgb = bilinear(sample.rgb).astype(sample.rgb.dtype)
    depth = np.where(valid, bilinear(sample.depth), 0).astype(sample.depth.dtype)
    return DepthSample(rgb, depth, valid)


def color_jitter(rgb: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    out = rgb.astype(np.float64) * brightness
    out = (out - grayscale(out).mean()) * contrast + grayscale(out).mean()
    gray = grayscale(out)[None]
    out = (out - gray) * saturation + gray
    return np.clip(out, 0.0, 1.0).astype(rgb.dtype)


def augment(sample: DepthSample, cfg: AugmentConfig, rng: np.random.Generator) -> DepthSample:
    """Random flip, rotation and color jitter. Depth values are never rescaled."""
    # draw every variate up front so the stream layout never depends on outcomes
    flip = rng.random() < cfg.flip_prob
    angle = rng.uniform(*cfg.rotation_range)
    b, c, s = rng.uniform(cfg.jitter_range[0], cfg.jitter_range[1], size=3)
    if flip:
        out = hflip(sample)
    else:
        out = DepthSample(sample.rgb.copy(), sample.depth.copy(), sample.valid.copy())
    if angle != 0.0:
        out = rotate(out, angle)
    if (b, c, s) != (1.0, 1.0, 1.0):
        out.rgb = color_jitter(out.rgb, b, c, s)
    return out


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample index)."""
    return np.random.default_rng([seed, epoch, index])


# --------------------------------------------------------------- preprocessing
def _nearest_indices(src: int, dst: int) -> np.ndarray:
    return np.minimum(np.floor(np.arange(dst) * (src / dst)).astype(np.intp), src - 1)


def center_crop_resize(rgb: np.ndarray, depth: np.ndarray, valid: np.ndarray | None = None,
                       resized=(256, 342), crop=(240, 320)) -> DepthSample:
    """640x480 -> bilinear 342x256 -> center crop 320x240 (offsets 8 rows, 11 cols)."""
    if rgb.shape != (3, 480, 640) or depth.shape != (1, 480, 640):
        raise ValueError(f"expected 640x480 inputs, got rgb {rgb.shape} and depth {depth.shape}")
    valid = depth > 0 if valid is None else valid
    rh, rw = resized
    ch, cw = crop
    top, left = (rh - ch) // 2, (rw - cw) // 2
    small_rgb = resize_array(rgb.astype(np.float64), resized)
    small_depth = resize_array(depth.astype(np.float64), resized)
    small_valid = valid[:, _nearest_indices(480, rh)][:, :, _nearest_indices(640, rw)]
    win = (slice(None), slice(top, top + ch), slice(left, left + cw))
    return DepthSample(
        small_rgb[win].astype(rgb.dtype),
        small_depth[win].astype(depth.dtype),
        small_valid[win] & (small_depth[win] > 0),
    )


# ------------------------------------------------------------------- synthetic
def synth_generate(seed: int, count: int, size: tuple[int, int] = (48, 64)) -> list[DepthSample]:
    """Procedural indoor-like scenes of shape ``size`` = (height, width).

    A sloped background plane plus 3-8 axis-aligned boxes at depths in
    [0.5, 8] m, painted far-to-near. Color is albedo times a depth-dependent
    shading factor, so nearer surfaces are brighter. Each albedo is a random
    hue with its largest channel at 1, so the brightest channel of a pixel
    equals the shading and depth is recoverable from color.
    """
    h, w = size
    if h % 16 or w % 16:
        raise ValueError(f"synthetic size {h}x{w} must be divisible by 16")
    rng = np.random.default_rng(seed)
    samples = []
    while len(samples) < count:
        sample = _synth_scene(rng, h, w)
        if make_edge_target(sample.depth).any():
            samples.append(sample)
    return samples


def _hue(rng: np.random.Generator) -> np.ndarray:
    c = rng.uniform(0.2, 1.0, size=3)
    return c / c.max()


def _synth_scene(rng: np.random.Generator, h: int, w: int) -> DepthSample:
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    base, slope_y, slope_x = rng.uniform(4.0, 7.0), rng.uniform(-3.0, 0.0), rng.uniform(-1.0, 1.0)
    depth = np.clip(base + slope_y * yy + slope_x * (xx - 0.5), 0.5, 8.0)
    albedo = np.broadcast_to(_hue(rng)[:, None, None], (3, h, w)).copy()

    n_boxes = int(rng.integers(3, 9))
    boxes = []
    for _ in range(n_boxes):
        bh = int(rng.integers(max(2, h // 8), h // 2 + 1))
        bw = int(rng.integers(max(2, w // 8), w // 2 + 1))
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        boxes.append((rng.uniform(0.5, 8.0), top, left, bh, bw, _hue(rng)))
    for d, top, left, bh, bw, color in sorted(boxes, key=lambda b: -b[0]):
        depth[top : top + bh, left : left + bw] = d
        albedo[:, top : top + bh, left : left + bw] = color[:, None, None]

    shading = 1.0 - 0.085 * depth
    rgb = np.clip(albedo * shading[None], 0.0, 1.0)
    return DepthSample(rgb.astype(np.float32), depth[None].astype(np.float32))


# ------------------------------------------------------------------------ files
def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6, 8-bit. ``rgb`` is (3, H, W) in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"write_ppm expects (3, H, W), got {rgb.shape}")
    _, h, w = rgb.shape
    pixels = np.rint(np.clip(rgb, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    try:
        tokens, offset = _ppm_tokens(buf, 4)
        if tokens[0] != b"P6":
            raise DatasetError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
        w, h, maxval = (int(t) for t in tokens[1:])
    except (ValueError, IndexError) as exc:
        if isinstance(exc, DatasetError):
            raise DatasetError(f"{path}: {exc}") from None
        raise DatasetError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    raster = buf[offset : offset + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise DatasetError(f"{path}: raster truncated ({len(raster)} of {3 * w * h} bytes)")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / 255.0


def write_dpt(path, depth: np.ndarray) -> None:
    """16-byte header (b"DPT1", u32 width, u32 height, u32 reserved) + float32 LE rows."""
    depth = np.asarray(depth)
    if depth.ndim == 3:
        depth = depth[0]
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DPT_MAGIC + struct.pack("<III", w, h, 0))
        f.write(depth.astype("<f4").tobytes())


def read_dpt(path) -> np.ndarray:
    """Returns a (1, H, W) float32 depth map."""
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != DPT_MAGIC:
        raise DatasetError(f"{path}: missing DPT1 header")
    w, h, _ = struct.unpack("<III", buf[4:16])
    payload = buf[16:]
    if len(payload) != 4 * w * h:
        raise DatasetError(f"{path}: expected {4 * w * h} payload bytes for {w}x{h}, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(1, h, w).astype(np.float32)


def save_dataset(samples, directory) -> list[str]:
    """Write samples as ``NNNN.ppm`` / ``NNNN.dpt`` pairs; invalid pixels get depth 0."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stems = []
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        write_ppm(directory / f"{stem}.ppm", s.rgb)
        write_dpt(directory / f"{stem}.dpt", np.where(s.valid, s.depth, 0))
        stems.append(stem)
    return stems


def load_dataset(directory) -> Iterator[DepthSample]:
    """Yield samples in lexicographic stem order; depth 0 marks invalid pixels."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory}: not a directory")
    names = sorted(os.listdir(directory))
    rgb_stems = {n[:-4] for n in names if n.endswith(".ppm")}
    depth_stems = {n[:-4] for n in names if n.endswith(".dpt")}
    for stem in sorted(rgb_stems | depth_stems):
        rgb_path, depth_path = directory / f"{stem}.ppm", directory / f"{stem}.dpt"
        if stem not in depth_stems:
            raise DatasetError(f"{rgb_path}: no matching depth file {depth_path.name}")
        if stem not in rgb_stems:
            raise DatasetError(f"{depth_path}: no matching image file {rgb_path.name}")
        rgb = read_ppm(rgb_path)
        depth = read_dpt(depth_path)
        if rgb.shape[1:] != depth.shape[1:]:
            raise DatasetError(
                f"size mismatch: {rgb_path.name} is {rgb.shape[2]}x{rgb.shape[1]} but "
                f"{depth_path.name} is {depth.shape[2]}x{depth.shape[1]}"
            )
        yield DepthSample(rgb, depth, depth > 0)


def stack_batch(samples: list[DepthSample], dtype=np.float32):
    rgb = np.stack([s.rgb for s in samples]).astype(dtype)
    depth = np.stack([s.depth for s in samples]).astype(dtype)
    valid = np.stack([s.valid for s in samples])
    return rgb, depth, valid
