"""Composite gradient descent for group-penalized M-estimation.

The penalized program ``L_n(beta) + sum_j rho(||beta_j||, sqrt(d_j) lam)``
is rewritten as ``Lbar(beta) + sum_j sqrt(d_j) lam ||beta_j||`` with the
smooth part ``Lbar = L_n - q_lam``. Each iteration takes a gradient step on
``Lbar`` followed by blockwise group soft-thresholding; the step size is
found by backtracking on the composite sufficient-decrease condition.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from . import _kernel
from .losses import LossSpec
from .model import CoefficientVector, Dataset, GroupStructure, ValidationError, WeightScheme
from .penalties import PenaltySpec, block_soft_threshold

log = logging.getLogger(__name__)

MAX_HALVINGS = 60


class SolverError(RuntimeError):
    """Numerical failure inside the solver (non-finite values, step underflow)."""


@dataclass(frozen=True)
class SolverConfig:
    R: float = 1e6
    max_iters: int = 10_000
    tol_obj: float = 1e-8
    tol_stat: float = 1e-6
    eta_init: float = 1.0
    eta_shrink: float = 0.5
    eta_grow: float = 2.0
    eta_max: float = 1e8
    seed: int = 0
    engine: str = "compiled"

    def __post_init__(self):
        if not self.R > 0:
            raise ValidationError("R must be positive")
        if not 0 < self.eta_shrink < 1 <= self.eta_grow:
            raise ValidationError("need 0 < eta_shrink < 1 <= eta_grow")
        if not (self.tol_obj > 0 and self.tol_stat > 0):
            raise ValidationError("tolerances must be positive")
        if self.engine not in ("compiled", "reference"):
            raise ValidationError(f"unknown solver engine {self.engine!r}")
        if not self.eta_init > 0 or self.max_iters < 1:
            raise ValidationError("eta_init must be positive and max_iters >= 1")


@dataclass
class FitResult:
    beta_hat: CoefficientVector
    objective_trace: list[float]
    iterations: int
    converged: bool
    stationarity_residual: float
    lam: float
    active_groups: set[int]
    eta: float = 1.0
    step1: FitResult | None = field(default=None, repr=False)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


class Problem:
    """Cached pieces of one penalized program at a fixed ``lam``."""

    def __init__(self, dataset: Dataset, scheme: WeightScheme, loss: LossSpec,
                 penalty: PenaltySpec, lam: float):
        if not lam >= 0:
            raise ValidationError(f"lambda must be nonnegative, got {lam}")
        self.X = dataset.X
        self.y = dataset.y
        self.n = dataset.n
        self.groups = dataset.groups
        self.w, self.v = scheme.weights(dataset.X)
        self.wv = self.w / self.v
        self.loss = loss
        self.penalty = penalty
        self.lam = float(lam)
        self.lam_j = self.groups.sqrt_sizes * self.lam
        self._labels = self.groups.labels
        self._starts = self.groups.offsets[:-1]

    def group_norms(self, beta):
        return np.sqrt(np.add.reduceat(beta * beta, self._starts))

    def residual(self, beta):
        return self.y - self.X @ beta

    def loss_value(self, r) -> float:
        return float(np.mean(self.wv * self.loss.value(r * self.v)))

    def loss_grad(self, r):
        return -(self.X.T @ (self.w * self.loss.deriv(r * self.v))) / self.n

    def smooth_value(self, beta, r, norms=None) -> float:
        """``L_n - q_lam``."""
        val = self.loss_value(r)
        if self.penalty.kind != "lasso":
            norms = self.group_norms(beta) if norms is None else norms
            val -= float(np.sum(self.penalty.q(norms, self.lam_j)))
        return val

    def smooth_grad(self, beta, r, norms=None):
        g = self.loss_grad(r)
        if self.penalty.kind != "lasso":
            norms = self.group_norms(beta) if norms is None else norms
            scale = np.zeros_like(norms)
            nz = norms > 0
            scale[nz] = self.penalty.q_deriv(norms[nz], self.lam_j[nz]) / norms[nz]
            g = g - beta * scale[self._labels]
        return g

    def l1_part(self, norms) -> float:
        return float(np.dot(self.lam_j, norms))

    def objective(self, beta) -> float:
        """Penalized objective ``L_n + sum_j rho``."""
        norms = self.group_norms(beta)
        return self.smooth_value(beta, self.residual(beta), norms) + self.l1_part(norms)

    def stationarity(self, beta, grad_smooth, norms=None) -> float:
        """Largest per-group violation of the first-order conditions."""
        norms = self.group_norms(beta) if norms is None else norms
        active = norms > 0
        unit = np.zeros_like(beta)
        unit_scale = np.zeros_like(norms)
        unit_scale[active] = self.lam_j[active] / norms[active]
        unit = beta * unit_scale[self._labels]
        resid = self.group_norms(grad_smooth + unit)
        gnorm = self.group_norms(grad_smooth)
        viol = np.where(active, resid, np.maximum(gnorm - self.lam_j, 0.0))
        return float(np.max(viol))


def _project_l1(beta, R):
    l1 = float(np.sum(np.abs(beta)))
    if l1 > R:
        beta = beta * (R / l1)
    return beta


def composite_step(beta_t: NDArray, eta: float, problem: Problem, grad: NDArray,
                   R: float = math.inf) -> NDArray:
    """One prox-gradient update from ``beta_t`` with step ``eta``.

    ``grad`` is the gradient of the smooth part at ``beta_t``. If the
    result leaves the l1 ball of radius ``R`` it is rescaled onto it.
    """
    if not eta > 0:
        raise ValidationError("step size must be positive")
    z = beta_t - eta * grad
    out = block_soft_threshold(z, eta * problem.lam_j, problem.groups)
    return _project_l1(out, R)


def backtracking_search(beta_t, eta_start, problem: Problem, config: SolverConfig,
                        f_t=None, grad=None):
    """Shrink the step until the composite sufficient-decrease condition holds.

    Returns ``(eta, beta_next, f_next, r_next)`` where ``f_next`` is the
    smooth part at ``beta_next`` and ``r_next`` its residual vector.
    """
    beta_t = np.asarray(beta_t, dtype=float)
    if f_t is None or grad is None:
        r_t = problem.residual(beta_t)
        f_t = problem.smooth_value(beta_t, r_t)
        grad = problem.smooth_grad(beta_t, r_t)
    if not np.all(np.isfinite(grad)):
        raise SolverError("non-finite gradient")
    # absorbs rounding in f near convergence; far below any real decrease
    slack = 8 * np.finfo(float).eps * max(1.0, abs(f_t))
    eta = float(eta_start)
    for _ in range(MAX_HALVINGS + 1):
        cand = composite_step(beta_t, eta, problem, grad, config.R)
        d = cand - beta_t
        r = problem.residual(cand)
        f = problem.smooth_value(cand, r)
        bound = f_t + float(grad @ d) + float(d @ d) / (2 * eta)
        if math.isfinite(f) and f <= bound + slack:
            return eta, cand, f, r
        eta *= config.eta_shrink
    raise SolverError(f"step size underflow after {MAX_HALVINGS} halvings")


def _check_init(beta0: NDArray, config: SolverConfig) -> NDArray:
    beta = np.array(beta0, dtype=float)
    if float(np.sum(np.abs(beta))) > config.R + 1e-9:
        raise ValidationError("initial point violates the l1 side constraint")
    return beta


def _late_convergence(trace, stat, config) -> bool:
    # loop stopped early on a rounding-level increase
    return stat < config.tol_stat and len(trace) > 1 and \
        abs(trace[-2] - trace[-1]) / max(1.0, abs(trace[-2])) < config.tol_obj


def _run_reference(problem: Problem, beta0: NDArray, config: SolverConfig) -> FitResult:
    """Plain numpy iteration; slow but easy to audit."""
    beta = _check_init(beta0, config)
    r = problem.residual(beta)
    norms = problem.group_norms(beta)
    f = problem.smooth_value(beta, r, norms)
    g = problem.smooth_grad(beta, r, norms)
    F = f + problem.l1_part(norms)
    if not math.isfinite(F):
        raise SolverError("non-finite objective at the initial point")
    trace = [F]
    stat = problem.stationarity(beta, g, norms)
    eta = config.eta_init
    converged = False
    it = 0
    while it < config.max_iters:
        eta, beta_new, f_new, r_new = backtracking_search(beta, eta, problem, config, f, g)
        it += 1
        norms = problem.group_norms(beta_new)
        F_new = f_new + problem.l1_part(norms)
        if not math.isfinite(F_new):
            raise SolverError("non-finite objective")
        if F_new > F:
            # only rounding can get here; keep the better point and stop
            log.debug("objective increase %.3g at iteration %d", F_new - F, it)
            break
        change = abs(F - F_new) / max(1.0, abs(F))
        beta, r, f, F = beta_new, r_new, f_new, F_new
        g = problem.smooth_grad(beta, r, norms)
        if not np.all(np.isfinite(g)):
            raise SolverError("non-finite gradient")
        trace.append(F)
        stat = problem.stationarity(beta, g, norms)
        if change < config.tol_obj and stat < config.tol_stat:
            converged = True
            break
        eta = min(eta * config.eta_grow, config.eta_max)
    if not converged:
        converged = _late_convergence(trace, stat, config)
    return _result(problem, beta, trace, it, converged, stat, eta)


def _run_compiled(problem: Problem, beta0: NDArray, config: SolverConfig) -> FitResult:
    beta = _check_init(beta0, config)
    beta, trace, it, converged, stat, eta, status = _kernel.solve(
        np.asfortranarray(problem.X), problem.y, problem.w, problem.v,
        _kernel.LOSS_CODES[problem.loss.kind], problem.loss.alpha,
        _kernel.PENALTY_CODES[problem.penalty.kind], float(problem.penalty.b),
        problem.lam_j, problem.groups.offsets, beta,
        float(config.R), int(config.max_iters), float(config.tol_obj), float(config.tol_stat),
        float(config.eta_init), float(config.eta_shrink), float(config.eta_grow),
        float(config.eta_max), MAX_HALVINGS)
    if status == _kernel.BAD_GRADIENT:
        raise SolverError("non-finite gradient")
    if status == _kernel.BAD_OBJECTIVE:
        raise SolverError("non-finite objective")
    if status == _kernel.STEP_UNDERFLOW:
        raise SolverError(f"step size underflow after {MAX_HALVINGS} halvings")
    trace = trace.tolist()
    if status == _kernel.ROUNDING_STOP:
        converged = _late_convergence(trace, stat, config)
    return _result(problem, beta, trace, int(it), bool(converged), float(stat), float(eta))


ENGINES = {"compiled": _run_compiled, "reference": _run_reference}


def _run(problem: Problem, beta0: NDArray, config: SolverConfig) -> FitResult:
    return ENGINES[config.engine](problem, beta0, config)


def _result(problem, beta, trace, it, converged, stat, eta) -> FitResult:
    beta_hat = CoefficientVector(beta, problem.groups)
    return FitResult(
        beta_hat=beta_hat,
        objective_trace=trace,
        iterations=it,
        converged=converged,
        stationarity_residual=stat,
        lam=problem.lam,
        active_groups=beta_hat.group_support(),
        eta=eta,
    )


def solve_gp(dataset: Dataset, scheme: WeightScheme, loss: LossSpec, penalty: PenaltySpec,
             lam: float, init: CoefficientVector | None = None,
             config: SolverConfig | None = None) -> FitResult:
    """Find a stationary point of the group-penalized program at ``lam``."""
    config = config or SolverConfig()
    problem = Problem(dataset, scheme, loss, penalty, lam)
    beta0 = np.zeros(dataset.p) if init is None else init.values
    return _run(problem, beta0, config)


STEP1_LOSS = LossSpec("huber")
STEP1_PENALTY = PenaltySpec("lasso")


def two_step_fit(dataset: Dataset, scheme: WeightScheme, loss: LossSpec, penalty: PenaltySpec,
                 lam: float, config: SolverConfig | None = None,
                 step1: FitResult | None = None) -> FitResult:
    """Huber group-lasso fit from zero, then the target program from there.

    A precomputed Huber group-lasso solution at the same ``lam`` and weight
    scheme may be passed as ``step1`` to skip the first solve.
    """
    config = config or SolverConfig()
    if step1 is None:
        step1 = solve_gp(dataset, scheme, STEP1_LOSS, STEP1_PENALTY, lam, None, config)
    elif step1.lam != lam:
        raise ValidationError("step-1 solution was computed at a different lambda")
    fit = solve_gp(dataset, scheme, loss, penalty, lam, step1.beta_hat, config)
    fit.step1 = step1
    return fit


def restricted_oracle_fit(dataset: Dataset, scheme: WeightScheme, loss: LossSpec,
                          group_support, config: SolverConfig | None = None,
                          init: CoefficientVector | None = None) -> FitResult:
    """Unpenalized M-estimate with coefficients outside ``group_support`` fixed at 0."""
    config = config or SolverConfig()
    support = sorted(int(j) for j in group_support)
    if not support:
        raise ValidationError("group support must be nonempty")
    groups = dataset.groups
    cols = np.concatenate([np.arange(*groups.offsets[j:j + 2]) for j in support])
    sub_groups = GroupStructure(tuple(groups.sizes[j] for j in support))
    sub = Dataset(dataset.X[:, cols], dataset.y, sub_groups)
    problem = Problem(sub, scheme, loss, PenaltySpec("lasso"), 0.0)
    # observation weights must come from the full covariate vector
    problem.w, problem.v = scheme.weights(dataset.X)
    problem.wv = problem.w / problem.v
    beta0 = np.zeros(len(cols)) if init is None else init.values[cols]
    try:
        sub_fit = _run(problem, beta0, config)
    except SolverError as exc:
        log.warning("restricted fit failed: %s", exc)
        return FitResult(CoefficientVector.zeros(groups), [math.nan], 0, False,
                         math.inf, 0.0, set())
    full = np.zeros(dataset.p)
    full[cols] = sub_fit.beta_hat.values
    beta_hat = CoefficientVector(full, groups)
    return replace(sub_fit, beta_hat=beta_hat, active_groups=beta_hat.group_support())
