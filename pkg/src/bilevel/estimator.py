"""Two-stage estimator: group-penalized fit, then elementwise hard thresholding.

Both tuning parameters come from k-fold cross-validation over a
``(lam, theta)`` grid. Thresholding is free once a fit exists, so each
``(fold, lam)`` pair is solved once and reused for every ``theta``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from numpy.typing import NDArray

from .losses import LossSpec
from .model import CoefficientVector, Dataset, ValidationError, WeightScheme
from .optimizer import (
    STEP1_LOSS,
    STEP1_PENALTY,
    FitResult,
    SolverConfig,
    SolverError,
    solve_gp,
    two_step_fit,
)
from .penalties import PenaltySpec

log = logging.getLogger(__name__)

SCORE_KINDS = ("mse", "trimmed_mse")


@dataclass(frozen=True)
class TuningGrid:
    lam_values: tuple[float, ...]
    theta_values: tuple[float, ...] = (0.0,)
    folds: int = 10
    trim_frac: float = 0.2
    score_kind: str = "trimmed_mse"
    max_support_frac: float | None = None

    def __post_init__(self):
        lam = tuple(float(x) for x in self.lam_values)
        theta = tuple(float(x) for x in self.theta_values)
        object.__setattr__(self, "lam_values", lam)
        object.__setattr__(self, "theta_values", theta)
        if not lam or not theta:
            raise ValidationError("tuning grids must be nonempty")
        if any(x <= 0 for x in lam) or any(x < 0 for x in theta):
            raise ValidationError("lambda values must be positive and theta values nonnegative")
        if list(lam) != sorted(lam) or list(theta) != sorted(theta):
            raise ValidationError("tuning grids must be sorted ascending")
        if self.folds < 2:
            raise ValidationError("need at least 2 folds")
        if not 0 <= self.trim_frac < 0.5:
            raise ValidationError("trim_frac must lie in [0, 0.5)")
        if self.score_kind not in SCORE_KINDS:
            raise ValidationError(f"unknown score kind {self.score_kind!r}")
        if self.max_support_frac is not None and not self.max_support_frac > 0:
            raise ValidationError("max_support_frac must be positive")


def default_grid(n: int, p: int, n_lam: int = 8, n_theta: int = 5,
                 lam_range=(0.01, 10.0), theta_range=(0.01, 0.5), **kw) -> TuningGrid:
    """Log-spaced ``lam`` in ``lam_range * sqrt(log p / n)``; uniform ``theta``."""
    base = math.sqrt(math.log(max(p, 2)) / n)
    lam = np.geomspace(lam_range[0] * base, lam_range[1] * base, n_lam)
    theta = np.linspace(theta_range[0], theta_range[1], n_theta) if n_theta > 0 else [0.0]
    return TuningGrid(tuple(lam), tuple(theta), **kw)


@dataclass
class TwoStageResult:
    beta_gp: CoefficientVector
    beta_final: CoefficientVector
    lam_selected: float
    theta_selected: float
    cv_table: NDArray[np.float64]
    gp_fit: FitResult
    grid: TuningGrid


def hard_threshold(beta: CoefficientVector, theta: float) -> CoefficientVector:
    """Zero every entry with ``|beta_m| < theta``; entries equal to ``theta`` stay."""
    if not theta >= 0:
        raise ValidationError("theta must be nonnegative")
    vals = np.where(np.abs(beta.values) >= theta, beta.values, 0.0)
    return CoefficientVector(vals, beta.groups)


def prediction_score(residuals, kind: str = "trimmed_mse", trim_frac: float = 0.2) -> float:
    """Mean squared residual, optionally after discarding the largest ones.

    ``trimmed_mse`` drops the ``ceil(trim_frac * m)`` largest squared
    residuals (always keeping at least one).
    """
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size == 0:
        raise ValidationError("no residuals to score")
    if not 0 <= trim_frac < 0.5:
        raise ValidationError("trim_frac must lie in [0, 0.5)")
    sq = r * r
    if kind == "mse":
        return float(np.mean(sq))
    if kind != "trimmed_mse":
        raise ValidationError(f"unknown score kind {kind!r}")
    drop = min(math.ceil(trim_frac * r.size), r.size - 1)
    if drop == 0:
        return float(np.mean(sq))
    kept = np.sort(sq)[: r.size - drop]
    return float(np.mean(kept))


def fold_assignment(n: int, folds: int, seed: int) -> list[NDArray[np.int64]]:
    """Seeded partition of ``range(n)`` into near-equal folds (sorted indices)."""
    if not 2 <= folds <= n:
        raise ValidationError(f"cannot split {n} rows into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


@dataclass
class CVFits:
    """Held-out residuals for every ``(lam, theta)`` cell.

    ``residuals[i, a, b]`` is the prediction error on row ``i`` from the fit
    that held row ``i`` out; ``sizes[k, a, b]`` is that fold's model size.
    """

    lam_values: tuple[float, ...]
    theta_values: tuple[float, ...]
    folds: list[NDArray[np.int64]]
    residuals: NDArray[np.float64]
    sizes: NDArray[np.int64]
    failures: int = 0


def _fold_job(dataset, train, test, scheme, loss, penalty, lam_values, theta_values,
              config, step1_cache, cache_key):
    train_data = dataset.subset(train)
    Xt, yt = dataset.X[test], dataset.y[test]
    L, T = len(lam_values), len(theta_values)
    res = np.empty((len(test), L, T))
    sizes = np.zeros((L, T), dtype=np.int64)
    failures = 0
    for a, lam in enumerate(lam_values):
        try:
            step1 = None
            if step1_cache is not None:
                step1 = step1_cache.get((cache_key, lam))
            fit = two_step_fit(train_data, scheme, loss, penalty, lam, config, step1)
            if step1_cache is not None:
                step1_cache[(cache_key, lam)] = fit.step1
            beta = fit.beta_hat
        except SolverError as exc:
            log.warning("fold fit failed at lam=%g: %s", lam, exc)
            res[:, a, :] = np.inf
            failures += 1
            continue
        for b, theta in enumerate(theta_values):
            vals = hard_threshold(beta, theta).values
            res[:, a, b] = yt - Xt @ vals
            sizes[a, b] = np.count_nonzero(vals)
    return res, sizes, failures


def cv_residuals(dataset: Dataset, scheme: WeightScheme, loss: LossSpec, penalty: PenaltySpec,
                 lam_values, theta_values, folds: int = 10,
                 config: SolverConfig | None = None, seed: int = 0,
                 step1_cache: dict | None = None, n_jobs: int = 1) -> CVFits:
    """Fit every ``(fold, lam)`` once and record held-out residuals for all ``theta``.

    ``step1_cache`` may be shared between calls with the same data, scheme
    and seed: the Huber group-lasso initializer does not depend on the
    target loss or penalty.
    """
    config = config or SolverConfig()
    lam_values = tuple(float(x) for x in lam_values)
    theta_values = tuple(float(x) for x in theta_values)
    parts = fold_assignment(dataset.n, folds, seed)
    all_rows = np.arange(dataset.n)
    jobs = []
    for k, test in enumerate(parts):
        train = np.setdiff1d(all_rows, test, assume_unique=True)
        jobs.append(delayed(_fold_job)(dataset, train, test, scheme, loss, penalty, lam_values,
                                       theta_values, config, step1_cache, ("fold", seed, k)))
    if n_jobs == 1:
        out = [fn(*args, **kw) for fn, args, kw in jobs]
    else:
        out = Parallel(n_jobs=n_jobs, prefer="threads")(jobs)
    residuals = np.empty((dataset.n, len(lam_values), len(theta_values)))
    sizes = np.empty((folds, len(lam_values), len(theta_values)), dtype=np.int64)
    failures = 0
    for k, (res, sz, nf) in enumerate(out):
        residuals[parts[k]] = res
        sizes[k] = sz
        failures += nf
    return CVFits(lam_values, theta_values, parts, residuals, sizes, failures)


def score_table(fits: CVFits, kind: str = "trimmed_mse", trim_frac: float = 0.2,
                max_support: float | None = None, theta_index=None) -> NDArray[np.float64]:
    """Mean fold score per ``(lam, theta)``; non-finite scores become ``+inf``.

    Cells where a fold's model has more than ``max_support`` nonzero
    coefficients score ``+inf`` for that fold.
    """
    t_idx = range(len(fits.theta_values)) if theta_index is None else list(theta_index)
    L = len(fits.lam_values)
    table = np.zeros((L, len(t_idx)))
    for k, rows in enumerate(fits.folds):
        for a in range(L):
            for c, b in enumerate(t_idx):
                s = prediction_score(fits.residuals[rows, a, b], kind, trim_frac)
                if not math.isfinite(s):
                    s = math.inf
                if max_support is not None and fits.sizes[k, a, b] > max_support:
                    s = math.inf
                table[a, c] += s
    return table / len(fits.folds)


def select_cell(table: NDArray) -> tuple[int, int]:
    """Index of the smallest score; ties go to the largest ``lam`` then largest ``theta``."""
    best = (math.inf, -1, -1)
    L, T = table.shape
    for a in range(L):
        for b in range(T):
            s = table[a, b]
            s = math.inf if not math.isfinite(s) else s
            if s < best[0] or (s == best[0] and (a, b) > (best[1], best[2])):
                best = (s, a, b)
    return best[1], best[2]


@dataclass
class CVResult:
    lam: float
    theta: float
    table: NDArray[np.float64]
    fits: CVFits = field(repr=False)


def cross_validate(dataset: Dataset, scheme: WeightScheme, loss: LossSpec, penalty: PenaltySpec,
                   grid: TuningGrid, config: SolverConfig | None = None, seed: int = 0,
                   n_jobs: int = 1, step1_cache: dict | None = None) -> CVResult:
    fits = cv_residuals(dataset, scheme, loss, penalty, grid.lam_values, grid.theta_values,
                        grid.folds, config, seed, step1_cache, n_jobs)
    max_support = None
    if grid.max_support_frac is not None:
        max_support = grid.max_support_frac * dataset.n
    table = score_table(fits, grid.score_kind, grid.trim_frac, max_support)
    a, b = select_cell(table)
    return CVResult(grid.lam_values[a], grid.theta_values[b], table, fits)


def fit_two_stage(dataset: Dataset, scheme: WeightScheme, loss: LossSpec, penalty: PenaltySpec,
                  grid: TuningGrid, config: SolverConfig | None = None, seed: int = 0,
                  n_jobs: int = 1) -> TwoStageResult:
    """Cross-validate, refit at the selected ``lam`` on all rows, then threshold."""
    config = config or SolverConfig()
    cv = cross_validate(dataset, scheme, loss, penalty, grid, config, seed, n_jobs)
    fit = two_step_fit(dataset, scheme, loss, penalty, cv.lam, config)
    return TwoStageResult(
        beta_gp=fit.beta_hat,
        beta_final=hard_threshold(fit.beta_hat, cv.theta),
        lam_selected=cv.lam,
        theta_selected=cv.theta,
        cv_table=cv.table,
        gp_fit=fit,
        grid=grid,
    )


def huber_lasso_init(dataset: Dataset, scheme: WeightScheme, lam: float,
                     config: SolverConfig | None = None) -> FitResult:
    """The first of the two solves in :func:`two_step_fit`, exposed for caching."""
    return solve_gp(dataset, scheme, STEP1_LOSS, STEP1_PENALTY, lam, None, config)
