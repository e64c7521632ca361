"""Residual functions and the weighted empirical loss.

The weighted loss is

    L_n(beta) = (1/n) sum_i w_i / v_i * l((y_i - x_i' beta) * v_i)

with gradient ``-(1/n) sum_i w_i x_i l'((y_i - x_i' beta) v_i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .model import CoefficientVector, Dataset, ValidationError, WeightScheme

KINDS = ("least_squares", "huber", "tukey", "cauchy")

# 95%-efficiency tunings under Gaussian errors.
DEFAULT_ALPHA = {"least_squares": 1.0, "huber": 1.345, "tukey": 4.685, "cauchy": 2.3849}

_ALIASES = {"ls": "least_squares", "l2": "least_squares"}


@dataclass(frozen=True)
class LossSpec:
    kind: str = "huber"
    alpha: float | None = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ValidationError(f"unknown loss {self.kind!r}; expected one of {KINDS}")
        alpha = DEFAULT_ALPHA[kind] if self.alpha is None else float(self.alpha)
        if not alpha > 0:
            raise ValidationError(f"loss scale alpha must be positive, got {alpha}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "alpha", alpha)

    @property
    def robust(self) -> bool:
        return self.kind != "least_squares"

    @property
    def k1(self) -> float:
        """Bound on ``|l'|`` (infinite for least squares)."""
        a = self.alpha
        if self.kind == "huber":
            return a
        if self.kind == "tukey":
            # attained at u = alpha / sqrt(5)
            return a * 16.0 / (25.0 * math.sqrt(5.0))
        if self.kind == "cauchy":
            return a / 2.0
        return math.inf

    @property
    def k2(self) -> float:
        """Lipschitz constant of ``l'``."""
        return 1.0

    def value(self, u: NDArray) -> NDArray:
        u = np.asarray(u, dtype=float)
        a = self.alpha
        if self.kind == "least_squares":
            return 0.5 * u * u
        if self.kind == "huber":
            au = np.abs(u)
            return np.where(au <= a, 0.5 * u * u, a * au - 0.5 * a * a)
        if self.kind == "tukey":
            r = np.minimum((u / a) ** 2, 1.0)
            return (a * a / 6.0) * (1.0 - (1.0 - r) ** 3)
        return 0.5 * a * a * np.log1p((u / a) ** 2)

    def deriv(self, u: NDArray) -> NDArray:
        u = np.asarray(u, dtype=float)
        a = self.alpha
        if self.kind == "least_squares":
            return u.copy()
        if self.kind == "huber":
            return np.clip(u, -a, a)
        if self.kind == "tukey":
            r = 1.0 - (u / a) ** 2
            return np.where(np.abs(u) < a, u * r * r, 0.0)
        return u / (1.0 + (u / a) ** 2)


def loss_eval(spec: LossSpec, u: float) -> tuple[float, float]:
    if not math.isfinite(u):
        raise ValidationError(f"residual must be finite, got {u}")
    return float(spec.value(u)), float(spec.deriv(u))


def _check_dims(dataset: Dataset, beta: CoefficientVector):
    if beta.values.shape[0] != dataset.p:
        raise ValidationError(f"beta has length {beta.values.shape[0]}, expected p={dataset.p}")


def objective(dataset: Dataset, scheme: WeightScheme, spec: LossSpec,
              beta: CoefficientVector) -> float:
    _check_dims(dataset, beta)
    w, v = scheme.weights(dataset.X)
    r = dataset.y - dataset.X @ beta.values
    return float(np.mean((w / v) * spec.value(r * v)))


def objective_gradient(dataset: Dataset, scheme: WeightScheme, spec: LossSpec,
                       beta: CoefficientVector) -> NDArray[np.float64]:
    _check_dims(dataset, beta)
    w, v = scheme.weights(dataset.X)
    r = dataset.y - dataset.X @ beta.values
    return -(dataset.X.T @ (w * spec.deriv(r * v))) / dataset.n


@dataclass
class LossCheck:
    """Outcome of the grid check of the bounded-derivative and Lipschitz conditions."""

    bounded_derivative: bool
    lipschitz_derivative: bool
    max_abs_deriv: float
    argmax_abs_deriv: float
    worst_bound_violation: float
    worst_lipschitz_violation: float

    @property
    def passed(self) -> bool:
        return self.bounded_derivative and self.lipschitz_derivative


def verify_loss_assumptions(spec: LossSpec, grid_bound: float = 100.0,
                            grid_size: int = 10_001, tol: float = 1e-9) -> LossCheck:
    """Check ``|l'| <= k1`` and ``|l'(u) - l'(u')| <= k2 |u - u'|`` on a grid.

    Checking consecutive grid points is enough for the Lipschitz clause:
    any wider pair telescopes into consecutive ones.
    """
    if not grid_bound > 0:
        raise ValidationError("grid_bound must be positive")
    u = np.linspace(-grid_bound, grid_bound, grid_size)
    d = spec.deriv(u)
    ad = np.abs(d)
    i = int(np.argmax(ad))
    bound_violation = float(np.max(ad - spec.k1)) if math.isfinite(spec.k1) else math.inf
    slopes = np.abs(np.diff(d)) - spec.k2 * np.diff(u)
    lip_violation = float(np.max(slopes))
    return LossCheck(
        bounded_derivative=bound_violation <= tol,
        lipschitz_derivative=lip_violation <= tol,
        max_abs_deriv=float(ad[i]),
        argmax_abs_deriv=float(u[i]),
        worst_bound_violation=bound_violation,
        worst_lipschitz_violation=lip_violation,
    )
