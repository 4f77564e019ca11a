"""Training objectives: masked L1 + gradient L1 for depth, BCE for edges."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functional import bce_with_logits
from .tensor import Tensor, abs_, mul, sub


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 20.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def _masked_mean_abs(x: Tensor, mask: np.ndarray) -> Tensor | None:
    count = int(mask.sum())
    if count == 0:
        return None
    return mul(abs_(x), Tensor(mask.astype(x.dtype))).sum() * (1.0 / count)


def depth_loss(d: Tensor, d_star, mask) -> Tensor:
    """L1 over valid pixels plus L1 of the residual's forward differences.

    The x (y) difference term averages over horizontally (vertically)
    adjacent pixel pairs that are both valid; a direction with no such pair
    contributes zero.
    """
    d_star = np.asarray(d_star.data if isinstance(d_star, Tensor) else d_star, dtype=d.dtype)
    mask = np.asarray(mask, dtype=bool)
    if d.shape != d_star.shape or mask.shape != d.shape:
        raise ValueError(f"depth_loss: shapes differ: pred {d.shape}, target {d_star.shape}, mask {mask.shape}")
    if not mask.any():
        raise ValueError("depth_loss: mask has no valid pixels")
    r = sub(d, Tensor(d_star))
    loss = _masked_mean_abs(r, mask)
    gx = sub(r[..., :, 1:], r[..., :, :-1])
    gx_term = _masked_mean_abs(gx, mask[..., :, 1:] & mask[..., :, :-1])
    gy = sub(r[..., 1:, :], r[..., :-1, :])
    gy_term = _masked_mean_abs(gy, mask[..., 1:, :] & mask[..., :-1, :])
    for term in (gx_term, gy_term):
        if term is not None:
            loss = loss + term
    return loss


def edge_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and 0/1 edge labels."""
    return bce_with_logits(logits, np.asarray(target))


def total_loss(d: Tensor, d_star, logits: Tensor, edge_target, mask,
               weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum ``lambda1 * depth + lambda2 * edge`` and its components."""
    ld = depth_loss(d, d_star, mask)
    le = edge_loss(logits, edge_target)
    total = ld * weights.lambda1 + le * weights.lambda2
    return total, {"depth": ld.item(), "edge": le.item(), "total": total.item()}
