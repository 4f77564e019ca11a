"""Depth accuracy metrics: RMSE, REL and threshold accuracies."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

REL_DENOMINATORS = ("ground_truth", "prediction")


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    rel: float
    delta1: float
    delta2: float
    delta3: float
    n_valid_pixels: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    def to_text(self) -> str:
        rows = [("RMSE", f"{self.rmse:.4f}"), ("REL", f"{self.rel:.4f}"), ("delta1", f"{self.delta1:.4f}"),
                ("delta2", f"{self.delta2:.4f}"), ("delta3", f"{self.delta3:.4f}"),
                ("pixels", str(self.n_valid_pixels))]
        return "\n".join(f"{k:<8}{v:>12}" for k, v in rows)


class MetricAccumulator:
    """Pixel-weighted running sums, so a dataset's report equals one big batch."""

    def __init__(self, rel_denominator: str = "ground_truth"):
        if rel_denominator not in REL_DENOMINATORS:
            raise ValueError(f"rel_denominator must be one of {REL_DENOMINATORS}, got {rel_denominator!r}")
        self.rel_denominator = rel_denominator
        self.sq_err = 0.0
        self.rel = 0.0
        self.hits = np.zeros(3, dtype=np.int64)
        self.count = 0

    def update(self, d, d_star, mask) -> None:
        d = np.asarray(d, dtype=np.float64)
        d_star = np.asarray(d_star, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if d.shape != d_star.shape or d.shape != mask.shape:
            raise ValueError(f"metrics: shapes differ: {d.shape}, {d_star.shape}, {mask.shape}")
        p, g = d[mask], d_star[mask]
        if np.any(p <= 0) or np.any(g <= 0):
            raise ValueError("metrics: depths must be positive on valid pixels (clamp predictions first)")
        err = p - g
        self.sq_err += float(np.sum(err * err))
        denom = g if self.rel_denominator == "ground_truth" else p
        self.rel += float(np.sum(np.abs(err) / denom))
        ratio = np.maximum(g / p, p / g)
        self.hits += np.array([np.count_nonzero(ratio < 1.25**i) for i in (1, 2, 3)])
        self.count += int(p.size)

    def report(self) -> EvalReport:
        if self.count == 0:
            raise ValueError("metrics: mask has no valid pixels")
        n = self.count
        d1, d2, d3 = (float(h) / n for h in self.hits)
        return EvalReport(float(np.sqrt(self.sq_err / n)), self.rel / n, d1, d2, d3, n)


def metrics(d, d_star, mask=None, rel_denominator: str = "ground_truth") -> EvalReport:
    """RMSE, REL and delta_i (strict ``max(d*/d, d/d*) < 1.25**i``) over valid pixels."""
    d = np.asarray(d)
    mask = np.ones(d.shape, dtype=bool) if mask is None else mask
    acc = MetricAccumulator(rel_denominator)
    acc.update(d, d_star, mask)
    return acc.report()
