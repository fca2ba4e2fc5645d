"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    failures: list = field(default_factory=list)  # (input index, flat coordinate, analytic, numeric)


def _rel_error(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-4,
               step: float = 1e-5, floor: float = 1e-4,
               seed_grad: np.ndarray | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn(*inputs)`` with central differences.

    Non-scalar outputs are contracted against ``seed_grad`` (random, fixed by
    a local generator, when not given). ``floor`` keeps the relative error
    meaningful for coordinates whose true gradient is ~0.
    """
    out = fn(*inputs)
    if seed_grad is None:
        seed_grad = np.random.default_rng(0).standard_normal(out.shape)

    def objective() -> float:
        return float(np.sum(fn(*inputs).data * seed_grad))

    for t in inputs:
        t.grad = None
    out.backward(seed_grad)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    failures = []
    worst = 0.0
    for idx, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        for coord in range(flat.size):
            orig = flat[coord]
            flat[coord] = orig + step
            plus = objective()
            flat[coord] = orig - step
            minus = objective()
            flat[coord] = orig
            numeric = (plus - minus) / (2 * step)
            a = analytic[idx].reshape(-1)[coord]
            err = float(_rel_error(np.array(a), np.array(numeric), floor))
            worst = max(worst, err)
            if err > tolerance:
                failures.append((idx, coord, float(a), float(numeric)))
    return GradCheckReport(passed=not failures, max_rel_error=worst, failures=failures)
