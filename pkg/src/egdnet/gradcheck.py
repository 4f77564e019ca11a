"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    per_input_errors: list[float] = field(default_factory=list)
    passed: bool = False
    tolerance: float = 1e-5
    message: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.message})" if self.message else ""
        return f"[{status}] {self.op_name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g}){extra}"


def _central_difference(builder, flat: np.ndarray, idx: int, eps: float) -> float:
    orig = flat[idx]
    flat[idx] = orig + eps
    f_plus = builder().item()
    flat[idx] = orig - eps
    f_minus = builder().item()
    flat[idx] = orig
    return (f_plus - f_minus) / (2 * eps)


def grad_check(
    builder: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-6,
    tol: float = 1e-5,
    op_name: str = "builder",
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    fallback_epsilons: Sequence[float] = (),
) -> GradCheckReport:
    """Compare analytic gradients of ``builder()`` against central differences.

    ``builder`` is re-evaluated with each input element nudged by +/-epsilon in
    place, so it must read the input tensors rather than copies of them. The
    relative error of each element is ``|a - n| / max(|a|, |n|, 1e-8)``.

    When ``max_elements`` is set, only that many randomly chosen elements of
    each input are perturbed (large parameter tensors).

    ``fallback_epsilons`` re-measures an element that fails at ``epsilon``
    with other step sizes and keeps the smallest error. A wrong gradient rule
    is off at every step size; a ReLU kink inside ``[x - e, x + e]`` or
    round-off on a near-zero gradient is not, so composite blocks use a small
    primary step with a larger fallback.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 inputs, got {t.dtype}")
        t.grad = None
    rng = rng if rng is not None else np.random.default_rng(0)

    root = builder()
    if root.size != 1:
        raise ValueError(f"grad_check: builder must return a scalar, got shape {root.shape}")
    if not np.isfinite(root.data).all():
        return GradCheckReport(op_name, float("inf"), [], False, tol, "non-finite forward value")
    root.backward()

    errors: list[float] = []
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        if max_elements is not None and flat.size > max_elements:
            picks = rng.choice(flat.size, size=max_elements, replace=False)
        else:
            picks = np.arange(flat.size)
        worst = 0.0
        for idx in picks:
            a = analytic.reshape(-1)[idx]
            rel = np.inf
            for eps in (epsilon, *fallback_epsilons):
                numeric = _central_difference(builder, flat, idx, eps)
                if not (np.isfinite(numeric) and np.isfinite(a)):
                    return GradCheckReport(op_name, float("inf"), errors, False, tol, "non-finite gradient")
                rel = min(rel, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
                if rel < tol:
                    break
            worst = max(worst, rel)
        errors.append(worst)
    max_err = max(errors) if errors else 0.0
    return GradCheckReport(op_name, max_err, errors, max_err < tol, tol)
