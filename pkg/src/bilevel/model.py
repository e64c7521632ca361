"""Grouped regression data model.

Groups are contiguous index blocks. Everything here is 0-based; the
1-based numbering only appears in user-facing files written by
:mod:`bilevel.io`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numpy.typing import NDArray


class ValidationError(ValueError):
    """Raised when inputs violate a structural precondition."""


@dataclass(frozen=True)
class GroupStructure:
    """Partition of ``p`` coefficients into contiguous, non-overlapping groups."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise ValidationError("group sizes must be a nonempty list")
        if any(s < 1 for s in sizes):
            raise ValidationError(f"group sizes must be >= 1, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @property
    def n_groups(self) -> int:
        return len(self.sizes)

    @property
    def p(self) -> int:
        return sum(self.sizes)

    @cached_property
    def offsets(self) -> NDArray[np.int64]:
        """Start index of each group, plus a trailing ``p``."""
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)

    @cached_property
    def sqrt_sizes(self) -> NDArray[np.float64]:
        return np.sqrt(np.asarray(self.sizes, dtype=float))

    @cached_property
    def labels(self) -> NDArray[np.int64]:
        """Group index of every coordinate."""
        return np.repeat(np.arange(self.n_groups), self.sizes)

    @property
    def d_max(self) -> int:
        return max(self.sizes)

    @property
    def d_min(self) -> int:
        return min(self.sizes)

    @property
    def d_ratio(self) -> float:
        """``sqrt(d_max / d_min)``."""
        return math.sqrt(self.d_max / self.d_min)

    def indices(self, j: int) -> range:
        self._check(j)
        return range(int(self.offsets[j]), int(self.offsets[j + 1]))

    def slice(self, j: int) -> slice:
        self._check(j)
        return slice(int(self.offsets[j]), int(self.offsets[j + 1]))

    def norms(self, beta: NDArray) -> NDArray[np.float64]:
        """Euclidean norm of every group block of ``beta``."""
        sq = np.add.reduceat(np.asarray(beta, dtype=float) ** 2, self.offsets[:-1])
        return np.sqrt(sq)

    def support(self, beta: NDArray) -> set[int]:
        return {int(j) for j in np.flatnonzero(self.norms(beta) > 0)}

    def _check(self, j: int):
        if not 0 <= j < self.n_groups:
            raise IndexError(f"group index {j} out of range [0, {self.n_groups})")


def build_group_structure(sizes: Sequence[int]) -> GroupStructure:
    return GroupStructure(tuple(sizes))


def equal_groups(p: int, size: int) -> GroupStructure:
    """Blocks of ``size`` columns; the last block takes the remainder."""
    if size < 1 or p < 1:
        raise ValidationError("p and block size must be positive")
    sizes = [size] * (p // size)
    if p % size:
        sizes.append(p % size)
    return GroupStructure(tuple(sizes))


@dataclass
class CoefficientVector:
    values: NDArray[np.float64]
    groups: GroupStructure

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.groups.p,):
            raise ValidationError(
                f"coefficient length {self.values.shape} does not match p={self.groups.p}"
            )

    @classmethod
    def zeros(cls, groups: GroupStructure) -> CoefficientVector:
        return cls(np.zeros(groups.p), groups)

    def group(self, j: int) -> NDArray[np.float64]:
        return group_view(self, j)

    def support(self) -> set[int]:
        return {int(m) for m in np.flatnonzero(self.values)}

    def group_support(self) -> set[int]:
        return self.groups.support(self.values)

    def copy(self) -> CoefficientVector:
        return CoefficientVector(self.values.copy(), self.groups)


def group_view(beta: CoefficientVector, j: int) -> NDArray[np.float64]:
    """Read-only view of the ``j``-th (0-based) group block."""
    view = beta.values[beta.groups.slice(j)]
    view.flags.writeable = False
    return view


@dataclass(frozen=True)
class Dataset:
    X: NDArray[np.float64]
    y: NDArray[np.float64]
    groups: GroupStructure

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=float)
        y = np.ascontiguousarray(self.y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValidationError(f"X must be a nonempty 2-D array, got shape {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise ValidationError(f"y has {y.shape[0]} entries but X has {X.shape[0]} rows")
        if X.shape[1] != self.groups.p:
            raise ValidationError(f"X has {X.shape[1]} columns but groups cover p={self.groups.p}")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValidationError("X and y must contain only finite values")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> Dataset:
        rows = np.asarray(rows)
        return Dataset(self.X[rows], self.y[rows], self.groups)


@dataclass(frozen=True)
class GroundTruth:
    beta_star: CoefficientVector
    S: frozenset[int] = field(init=False)
    I0: frozenset[int] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "S", frozenset(self.beta_star.group_support()))
        object.__setattr__(self, "I0", frozenset(self.beta_star.support()))

    @property
    def min_group_strength(self) -> float:
        if not self.S:
            return 0.0
        norms = self.beta_star.groups.norms(self.beta_star.values)
        return float(min(norms[j] for j in self.S))

    @property
    def min_signal_strength(self) -> float:
        if not self.I0:
            return 0.0
        return float(np.min(np.abs(self.beta_star.values[sorted(self.I0)])))

    @property
    def k(self) -> int:
        """Number of coordinates inside important groups."""
        return sum(self.beta_star.groups.sizes[j] for j in self.S)


@dataclass(frozen=True)
class WeightScheme:
    """Observation weights ``w(x)`` and ``v(x)``.

    ``kind="unit"`` gives ``w = v = 1``. ``kind="bounded"`` gives
    ``w(x) = min(1, c / ||x||_inf)`` and ``v = 1``, which downweights rows
    with extreme covariates.
    """

    kind: str = "unit"
    c: float = 4.0

    def __post_init__(self):
        if self.kind not in ("unit", "bounded"):
            raise ValidationError(f"unknown weight scheme {self.kind!r}")
        if self.kind == "bounded" and not self.c > 0:
            raise ValidationError("bounded weight scheme needs c > 0")

    @classmethod
    def parse(cls, text: str) -> WeightScheme:
        """Parse ``unit`` or ``bounded:<c>``."""
        if text == "unit":
            return cls("unit")
        if text.startswith("bounded"):
            _, _, c = text.partition(":")
            try:
                return cls("bounded", float(c) if c else 4.0)
            except ValueError:
                raise ValidationError(f"cannot parse weight scheme {text!r}") from None
        raise ValidationError(f"cannot parse weight scheme {text!r}")

    def __str__(self):
        return "unit" if self.kind == "unit" else f"bounded:{self.c:g}"

    def weights(self, X: NDArray) -> tuple[NDArray, NDArray]:
        """Vectorized ``(w, v)`` for every row of ``X``."""
        X = np.atleast_2d(X)
        n = X.shape[0]
        v = np.ones(n)
        if self.kind == "unit":
            return np.ones(n), v
        sup = np.max(np.abs(X), axis=1)
        with np.errstate(divide="ignore"):
            w = np.minimum(1.0, np.where(sup > 0, self.c / sup, np.inf))
        return w, v


def eval_weights(scheme: WeightScheme, x: NDArray) -> tuple[float, float]:
    w, v = scheme.weights(np.asarray(x, dtype=float)[None, :])
    return float(w[0]), float(v[0])
