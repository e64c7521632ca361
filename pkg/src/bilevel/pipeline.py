"""Preprocessing for high-dimensional screening studies.

Variance then correlation pre-screening, cubic B-spline expansion of
each kept feature into its own group, and random holdout splits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import BSpline

from .estimator import TuningGrid, fit_two_stage
from .io import DataError
from .losses import LossSpec
from .model import Dataset, GroupStructure, ValidationError, WeightScheme
from .optimizer import SolverConfig
from .penalties import PenaltySpec


def _top_k(scores: NDArray, k: int) -> NDArray[np.int64]:
    # stable sort on -score keeps the earlier column on ties
    return np.argsort(-scores, kind="stable")[:k]


def prescreen(X: NDArray, y: NDArray, n_by_variance: int, n_by_correlation: int) -> NDArray[np.int64]:
    """Keep the highest-variance columns, then the most correlated with ``y``.

    Returns the kept column indices in ascending order.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if y.shape != (n,):
        raise ValidationError("y must have one entry per row of X")
    if not 1 <= n_by_correlation <= n_by_variance <= p:
        raise ValidationError(
            f"need 1 <= n_by_correlation <= n_by_variance <= {p}, "
            f"got {n_by_correlation}, {n_by_variance}")
    yc = y - y.mean()
    y_ss = float(yc @ yc)
    if y_ss == 0.0:
        raise DataError("response is constant; correlation is undefined")
    var = X.var(axis=0, ddof=1) if n > 1 else np.zeros(p)
    keep = np.sort(_top_k(var, n_by_variance))
    Xk = X[:, keep] - X[:, keep].mean(axis=0)
    ss = np.einsum("ij,ij->j", Xk, Xk)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(ss > 0, np.abs(Xk.T @ yc) / np.sqrt(ss * y_ss), 0.0)
    return np.sort(keep[_top_k(corr, n_by_correlation)])


def bspline_knots(column: NDArray, n_basis: int, degree: int = 3) -> NDArray[np.float64]:
    """Clamped knot vector with interior knots at equally spaced quantiles."""
    x = np.asarray(column, dtype=float)
    if n_basis < degree + 1:
        raise ValidationError(f"need n_basis >= {degree + 1}, got {n_basis}")
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise DataError("cannot expand a constant column")
    n_inner = n_basis - degree - 1
    levels = np.arange(1, n_inner + 1) / (n_inner + 1)
    inner = np.quantile(x, levels) if n_inner else np.empty(0)
    if np.any(inner <= lo) or np.any(inner >= hi):
        raise DataError("column has too many tied values for quantile knots")
    return np.concatenate([[lo] * (degree + 1), inner, [hi] * (degree + 1)])


def bspline_expand(column: NDArray, n_basis: int = 5, degree: int = 3) -> NDArray[np.float64]:
    """Evaluate the clamped cubic B-spline basis at every entry of ``column``.

    Returns an ``n x n_basis`` matrix whose rows sum to one.
    """
    x = np.asarray(column, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise DataError("column contains non-finite values")
    t = bspline_knots(x, n_basis, degree)
    return BSpline.design_matrix(x, t, degree).toarray()


def expand_columns(X: NDArray, n_basis: int = 5) -> tuple[NDArray[np.float64], GroupStructure]:
    """Expand every column into its own group of ``n_basis`` spline features."""
    X = np.asarray(X, dtype=float)
    blocks = [bspline_expand(X[:, m], n_basis) for m in range(X.shape[1])]
    return np.hstack(blocks), GroupStructure((n_basis,) * X.shape[1])


def standardize(X: NDArray) -> NDArray[np.float64]:
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise DataError(f"constant column(s) {np.flatnonzero(sd == 0)[:5].tolist()}")
    return (X - X.mean(axis=0)) / sd


def split_holdout(n: int, holdout_size: int, seed: int) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """Uniform random train/test split; both index arrays come back sorted."""
    if not 0 < holdout_size < n:
        raise ValidationError(f"holdout size must be in (0, {n}), got {holdout_size}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[holdout_size:]), np.sort(perm[:holdout_size])


@dataclass
class SplitOutcome:
    split: int
    test_rows: NDArray[np.int64]
    residuals: NDArray[np.float64]
    lam: float
    theta: float
    n_groups: int
    n_coefs: int

    @property
    def mse(self) -> float:
        return float(np.mean(self.residuals ** 2))


def run_pipeline(X: NDArray, y: NDArray, n_by_variance: int, n_by_correlation: int,
                 loss: LossSpec, penalty: PenaltySpec, scheme: WeightScheme, grid: TuningGrid,
                 n_basis: int = 5, n_splits: int = 10, holdout: int = 6, seed: int = 0,
                 standardize_features: bool = True,
                 config: SolverConfig | None = None) -> tuple[NDArray[np.int64], list[SplitOutcome]]:
    """Screen, expand and fit on repeated random splits.

    Screening and expansion use all rows; each split then runs the full
    cross-validated fit on its training rows and records test residuals.
    Split ``s`` uses seeds derived from ``(seed, s)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if standardize_features:
        X = standardize(X)
    kept = prescreen(X, y, n_by_variance, n_by_correlation)
    Z, groups = expand_columns(X[:, kept], n_basis)
    outcomes = []
    for s in range(n_splits):
        split_seed, cv_seed = np.random.SeedSequence([int(seed), s]).generate_state(2)
        train, test = split_holdout(len(y), holdout, int(split_seed))
        data = Dataset(Z[train], y[train], groups)
        res = fit_two_stage(data, scheme, loss, penalty, grid, config, int(cv_seed))
        beta = res.beta_final.values
        outcomes.append(SplitOutcome(
            split=s, test_rows=test, residuals=y[test] - Z[test] @ beta,
            lam=res.lam_selected, theta=res.theta_selected,
            n_groups=len(res.beta_final.group_support()), n_coefs=int(np.count_nonzero(beta))))
    return kept, outcomes
