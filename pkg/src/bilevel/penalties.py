"""Group penalties, their concave part, and the group soft-thresholding prox.

A penalty ``rho(t, lam)`` is split as ``rho = lam*|t| - q(t, lam)``. The
solver treats ``-q`` as part of the smooth loss and handles the
``lam*|t|`` part through its proximal operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .model import CoefficientVector, ValidationError

KINDS = ("lasso", "mcp")


@dataclass(frozen=True)
class PenaltySpec:
    kind: str = "mcp"
    b: float = 3.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown penalty {self.kind!r}; expected one of {KINDS}")
        if self.kind == "mcp" and not self.b > 1:
            raise ValidationError(f"MCP needs b > 1, got {self.b}")

    @property
    def mu(self) -> float:
        """Weak-convexity constant: ``rho + mu t^2 / 2`` is convex."""
        return 0.0 if self.kind == "lasso" else 1.0 / self.b

    @property
    def delta(self) -> float:
        """``rho'(t) = 0`` for ``t >= delta * lam`` (infinite for the lasso)."""
        return math.inf if self.kind == "lasso" else float(self.b)

    @property
    def convex(self) -> bool:
        return self.kind == "lasso"

    def g(self, r):
        """Scaling bound ``rho(t, r lam) / rho(t, lam) <= g(r)`` for ``r >= 1``."""
        r = np.asarray(r, dtype=float)
        return r if self.kind == "lasso" else r * r

    # vectorized primitives; ``lam`` broadcasts against ``t``

    def value(self, t, lam):
        t = np.abs(np.asarray(t, dtype=float))
        lam = np.asarray(lam, dtype=float)
        if self.kind == "lasso":
            return lam * t
        b = self.b
        return np.where(t <= b * lam, lam * t - t * t / (2.0 * b), 0.5 * b * lam * lam)

    def deriv(self, t, lam):
        """``d rho / dt``; at ``t = 0`` this is the right limit ``lam``."""
        t = np.asarray(t, dtype=float)
        lam = np.asarray(lam, dtype=float)
        sign = np.where(t < 0, -1.0, 1.0)
        if self.kind == "lasso":
            return sign * lam
        return sign * np.maximum(lam - np.abs(t) / self.b, 0.0)

    def q(self, t, lam):
        t = np.abs(np.asarray(t, dtype=float))
        lam = np.asarray(lam, dtype=float)
        if self.kind == "lasso":
            return np.zeros(np.broadcast(t, lam).shape)
        b = self.b
        return np.where(t <= b * lam, t * t / (2.0 * b), lam * t - 0.5 * b * lam * lam)

    def q_deriv(self, t, lam):
        """``d q / dt``, zero at ``t = 0``."""
        t = np.asarray(t, dtype=float)
        lam = np.asarray(lam, dtype=float)
        if self.kind == "lasso":
            return np.zeros(np.broadcast(t, lam).shape)
        return np.sign(t) * np.minimum(lam, np.abs(t) / self.b)


def _check_lam(lam: float):
    if not lam >= 0:
        raise ValidationError(f"lambda must be nonnegative, got {lam}")


def penalty_eval(spec: PenaltySpec, t: float, lam: float) -> tuple[float, float]:
    _check_lam(lam)
    return float(spec.value(t, lam)), float(spec.deriv(t, lam))


def group_lambdas(groups, lam: float) -> NDArray[np.float64]:
    """Per-group level ``sqrt(d_j) * lam``."""
    return groups.sqrt_sizes * lam


def group_penalty_total(spec: PenaltySpec, beta: CoefficientVector, lam: float) -> float:
    _check_lam(lam)
    norms = beta.groups.norms(beta.values)
    return float(np.sum(spec.value(norms, group_lambdas(beta.groups, lam))))


def q_total(spec: PenaltySpec, beta: CoefficientVector, lam: float) -> float:
    _check_lam(lam)
    norms = beta.groups.norms(beta.values)
    return float(np.sum(spec.q(norms, group_lambdas(beta.groups, lam))))


def q_gradient(spec: PenaltySpec, beta: CoefficientVector, lam: float) -> NDArray[np.float64]:
    _check_lam(lam)
    groups = beta.groups
    norms = groups.norms(beta.values)
    scale = np.zeros_like(norms)
    nz = norms > 0
    scale[nz] = spec.q_deriv(norms[nz], group_lambdas(groups, lam)[nz]) / norms[nz]
    return beta.values * scale[groups.labels]


def group_soft_threshold(z: NDArray, delta: float) -> NDArray[np.float64]:
    """Prox of ``delta * ||.||_2``: shrink ``z`` towards zero by ``delta`` in norm."""
    if not delta >= 0:
        raise ValidationError(f"threshold must be nonnegative, got {delta}")
    z = np.asarray(z, dtype=float)
    nrm = float(np.linalg.norm(z))
    if nrm <= delta:
        return np.zeros_like(z)
    return (1.0 - delta / nrm) * z


def block_soft_threshold(z: NDArray, thresholds: NDArray, groups) -> NDArray[np.float64]:
    """Apply :func:`group_soft_threshold` to every group block at once."""
    norms = groups.norms(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(norms > thresholds, 1.0 - thresholds / norms, 0.0)
    return z * factor[groups.labels]


@dataclass
class AmenabilityReport:
    clauses: dict[str, bool] = field(default_factory=dict)
    worst: dict[str, float] = field(default_factory=dict)

    @property
    def mu_amenable(self) -> bool:
        return all(self.clauses[c] for c in ("i", "ii", "iii", "iv", "v", "vi", "vii", "viii"))

    @property
    def mu_delta_amenable(self) -> bool:
        return self.mu_amenable and self.clauses["ix"]


def verify_amenability(spec: PenaltySpec, lam_grid, t_grid, tol: float = 1e-9,
                       h0: float = 1e-8) -> AmenabilityReport:
    """Grid check of the penalty conditions needed for group selection.

    ``t_grid`` holds positive values; clause (viii) uses second differences
    weighted by the local spacing, so the grid need not be uniform.
    """
    lam = np.sort(np.asarray(lam_grid, dtype=float))
    t = np.sort(np.asarray(t_grid, dtype=float))
    if lam.size == 0 or t.size == 0 or lam.min() <= 0 or t.min() <= 0:
        raise ValidationError("lambda and t grids must be nonempty and positive")
    L, T = np.meshgrid(lam, t, indexing="ij")
    rho = spec.value(T, L)
    scale = np.maximum(1.0, np.abs(rho))
    report = AmenabilityReport()

    def record(name, violation, threshold):
        report.worst[name] = float(violation)
        report.clauses[name] = bool(violation <= threshold)

    # (i) nondecreasing in lambda
    record("i", np.max(-np.diff(rho, axis=0), initial=0.0), tol)

    # (ii) rho(t, r lam) <= g(r) rho(t, lam)
    worst = 0.0
    for r in (1.0, 1.5, 2.0, 5.0, 10.0):
        lhs = spec.value(T, r * L)
        rhs = spec.g(r) * rho
        worst = max(worst, float(np.max((lhs - rhs) / scale)))
    record("ii", worst, tol)

    # (iii) symmetry and rho(0) = 0
    sym = np.max(np.abs(spec.value(-T, L) - rho))
    at0 = np.max(np.abs(spec.value(np.zeros_like(lam), lam)))
    record("iii", max(sym, at0), 0.0)

    # (iv) nondecreasing in t
    record("iv", np.max(-np.diff(rho, axis=1), initial=0.0), tol)

    # (v) rho(t)/t nonincreasing
    ratio = rho / T
    rel = np.diff(ratio, axis=1) / np.maximum(1.0, np.abs(ratio[:, 1:]))
    record("v", np.max(rel, initial=0.0), 1e-12)

    # (vi) analytic derivative matches central differences away from 0
    h = 1e-6
    fd = (spec.value(T + h, L) - spec.value(T - h, L)) / (2 * h)
    mask = T > 2 * h
    record("vi", np.max(np.abs(fd - spec.deriv(T, L))[mask], initial=0.0), 1e-5)

    # (vii) right derivative at zero equals lam
    right = spec.value(h0, lam) / h0
    reported = spec.deriv(np.zeros_like(lam), lam)
    record("vii", max(np.max(np.abs(right - lam)), np.max(np.abs(reported - lam))), 1e-6)

    # (viii) rho + mu t^2/2 convex
    f = rho + 0.5 * spec.mu * T * T
    if t.size >= 3:
        dt = np.diff(t)
        slopes = np.diff(f, axis=1) / dt
        second = np.diff(slopes, axis=1) * 0.5 * (dt[1:] + dt[:-1])
        record("viii", np.max(-second, initial=0.0), tol)
    else:
        record("viii", 0.0, tol)

    # (ix) derivative vanishes beyond delta * lam
    if math.isinf(spec.delta):
        report.clauses["ix"] = False
        report.worst["ix"] = math.inf
    else:
        beyond = T >= spec.delta * L
        record("ix", np.max(np.abs(spec.deriv(T, L))[beyond], initial=0.0), 0.0)
    return report
