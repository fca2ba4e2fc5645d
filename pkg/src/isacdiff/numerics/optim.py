"""RMSprop and plateau-driven learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .layers import Parameter

RHO = 0.99
EPS = 1e-8


class NonFiniteGradientError(FloatingPointError):
    pass


def rmsprop_step(named_params: Iterable[tuple[str, Parameter]], learning_rate: float,
                 rho: float = RHO, eps: float = EPS) -> None:
    """One in-place RMSprop update over every parameter.

    accumulator <- rho * accumulator + (1 - rho) * g**2
    param       <- param - lr * g / (sqrt(accumulator) + eps)
    """
    named_params = list(named_params)
    for path, p in named_params:
        if p.grad is None:
            raise ValueError(f"no gradient populated for parameter {path!r}")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {path!r}")
    for _, p in named_params:
        g = p.grad
        acc = p.accumulator
        acc *= rho
        acc += (1.0 - rho) * np.square(g)
        denom = np.sqrt(acc)
        denom += eps
        p.data -= learning_rate * (g / denom)


@dataclass
class OptimizerState:
    """Learning-rate schedule that halves on validation plateaus."""

    learning_rate: float = 1e-3
    decay_factor: float = 0.5
    patience: int = 5
    best_validation_loss: float = float("inf")
    epochs_since_improvement: int = 0
    rho: float = RHO
    eps: float = EPS

    def observe(self, validation_loss: float) -> bool:
        """Record one epoch's validation loss; return True if lr was decayed."""
        if validation_loss < self.best_validation_loss:
            self.best_validation_loss = validation_loss
            self.epochs_since_improvement = 0
            return False
        self.epochs_since_improvement += 1
        if self.epochs_since_improvement >= self.patience:
            self.learning_rate *= self.decay_factor
            self.epochs_since_improvement = 0
            return True
        return False
