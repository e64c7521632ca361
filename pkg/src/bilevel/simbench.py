"""Simulation designs, selection metrics and replicated experiments."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .estimator import (
    TuningGrid,
    cv_residuals,
    default_grid,
    hard_threshold,
    select_cell,
    score_table,
)
from .losses import LossSpec
from .model import (
    CoefficientVector,
    Dataset,
    GroundTruth,
    GroupStructure,
    ValidationError,
    WeightScheme,
)
from .optimizer import SolverConfig, SolverError, two_step_fit
from .penalties import PenaltySpec

log = logging.getLogger(__name__)

ERROR_KINDS = ("gaussian", "t1", "mix_cauchy")


def make_block_covariance(groups: GroupStructure, a: float, b: float) -> NDArray[np.float64]:
    """Unit-diagonal covariance with alternating-sign block correlation.

    Entry ``(i, j)`` is ``(-1)**(i+j) * a`` inside a group and
    ``(-1)**(i+j) * a * b`` across groups.
    """
    if not (0 <= a < 1 and 0 <= b < 1):
        raise ValidationError(f"correlation parameters must lie in [0, 1), got a={a}, b={b}")
    idx = np.arange(groups.p)
    sign = np.where((idx[:, None] + idx[None, :]) % 2 == 0, 1.0, -1.0)
    lab = groups.labels
    same = lab[:, None] == lab[None, :]
    sigma = sign * np.where(same, a, a * b)
    np.fill_diagonal(sigma, 1.0)
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"covariance with a={a}, b={b} is not positive definite") from exc
    return sigma


def alternating_signs(p: int) -> NDArray[np.float64]:
    """``+1, -1, +1, ...`` over coordinates."""
    return np.where(np.arange(p) % 2 == 0, 1.0, -1.0)


@dataclass(frozen=True)
class SimConfig:
    """One simulation scenario.

    ``magnitudes`` lists ``|beta*_j|`` for the leading groups; the remaining
    groups are zero. Signs alternate over coordinates.
    """

    n: int
    group_sizes: tuple[int, ...]
    magnitudes: tuple[tuple[float, ...], ...]
    a: float = 0.8
    b: float = 0.5
    error_kind: str = "gaussian"
    p_normal: float = 0.7
    x_contamination: float = 0.0
    contamination_df: int = 10
    contamination_unit: str = "rows"
    replications: int = 20
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "group_sizes", tuple(int(s) for s in self.group_sizes))
        object.__setattr__(self, "magnitudes", tuple(tuple(float(v) for v in m) for m in self.magnitudes))
        if self.error_kind not in ERROR_KINDS:
            raise ValidationError(f"unknown error kind {self.error_kind!r}")
        if len(self.magnitudes) > len(self.group_sizes):
            raise ValidationError("more magnitude blocks than groups")
        for j, m in enumerate(self.magnitudes):
            if len(m) != self.group_sizes[j]:
                raise ValidationError(
                    f"group {j} has size {self.group_sizes[j]} but {len(m)} magnitudes")
        if not 0 <= self.x_contamination < 1:
            raise ValidationError("contamination fraction must lie in [0, 1)")
        if self.contamination_unit not in ("rows", "entries"):
            raise ValidationError("contamination unit must be 'rows' or 'entries'")
        if not 0 <= self.p_normal <= 1:
            raise ValidationError("p_normal must lie in [0, 1]")
        if self.n < 2 or self.replications < 1:
            raise ValidationError("need n >= 2 and at least one replication")

    @property
    def groups(self) -> GroupStructure:
        return GroupStructure(self.group_sizes)

    @property
    def p(self) -> int:
        return sum(self.group_sizes)

    def beta_star(self) -> CoefficientVector:
        mags = np.zeros(self.p)
        flat = [v for m in self.magnitudes for v in m]
        mags[: len(flat)] = flat
        return CoefficientVector(alternating_signs(self.p) * mags, self.groups)

    def truth(self) -> GroundTruth:
        return GroundTruth(self.beta_star())


def _pad(sizes: Sequence[int], p_total: int, J: int, fill: int) -> tuple[int, ...]:
    sizes = list(sizes) + [fill] * (J - len(sizes))
    assert sum(sizes) == p_total
    return tuple(sizes)


def example1(error_kind: str = "gaussian", **kw) -> SimConfig:
    """Group-level sparsity: five active groups out of 100, p = 500."""
    mags = ((3.0,) * 4, (3.0,) * 4, (2.0,) * 6, (2.0,) * 6, (1.5,) * 5)
    sizes = _pad([4, 4, 6, 6, 5], 500, 100, 5)
    kw.setdefault("n", 100)
    return SimConfig(group_sizes=sizes, magnitudes=mags, a=0.8, b=0.5,
                     error_kind=error_kind, **kw)


_EX2_I = (
    (1.5, 2, 0, 2.5),
    (3, 2, 0, 0, 2),
    (1.5, 0, 2.5, 3, 0, 0),
    (2, 1.5, 0, 0, 0, 0),
    (2.5, 0, 0, 0),
    (3, 2.5, 2.5, 2, 1.5),
)

_EX2_III = (
    (3, 2, 0, 0, 0),
    (1.5, 2, 2.5, 2.5, 3) + (0,) * 5,
    (1.5, 0, 2.5, 3, 0, 3, 2, 1.5) + (0,) * 7,
    (3, 3, 2.5, 2.5, 2, 2, 1.5, 1.5, 1.5, 1.5),
)


def example2(variant: str = "i", error_kind: str = "gaussian", **kw) -> SimConfig:
    """Bi-level sparsity designs (i), (ii) and (iii)."""
    kw.setdefault("n", 100)
    if variant in ("i", "ii"):
        sizes = _pad([len(m) for m in _EX2_I], 500, 100, 5)
        a, b = (0.8, 0.5) if variant == "i" else (0.5, 0.8)
        return SimConfig(group_sizes=sizes, magnitudes=_EX2_I, a=a, b=b,
                         error_kind=error_kind, **kw)
    if variant == "iii":
        sizes = _pad([len(m) for m in _EX2_III], 1000, 100, 10)
        return SimConfig(group_sizes=sizes, magnitudes=_EX2_III, a=0.8, b=0.5,
                         error_kind=error_kind, **kw)
    raise ValidationError(f"unknown example-2 variant {variant!r}")


def example3(error_kind: str = "gaussian", **kw) -> SimConfig:
    """Design (i) of example 2 with n = 120 and 20% of covariate rows contaminated."""
    kw.setdefault("n", 120)
    kw.setdefault("x_contamination", 0.2)
    return example2("i", error_kind=error_kind, **kw)


PRESETS = {
    "example1": example1,
    "example2i": lambda **kw: example2("i", **kw),
    "example2ii": lambda **kw: example2("ii", **kw),
    "example2iii": lambda **kw: example2("iii", **kw),
    "example3": example3,
}


def _errors(rng: np.random.Generator, n: int, p_normal: float) -> NDArray[np.float64]:
    # Gaussian and t1 are the two ends of the same mixture, so every kind
    # consumes the generator identically.
    z = rng.standard_normal(n)
    cauchy = rng.standard_normal(n) / rng.standard_normal(n)
    u = rng.random(n)
    return np.where(u < p_normal, z, cauchy)


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(rep)])


def contaminate_covariates(dataset: Dataset, fraction: float,
                           rng: np.random.Generator | int, df: int = 10,
                           unit: str = "rows") -> Dataset:
    """Overwrite a fraction of the covariates with centred chi-square draws.

    With ``unit="rows"`` whole rows are replaced; with ``unit="entries"``
    individual matrix entries are. Draws are centred by the theoretical
    mean ``df``. The response is left untouched.
    """
    if not 0 <= fraction < 1:
        raise ValidationError("contamination fraction must lie in [0, 1)")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    X = np.array(dataset.X)
    n, p = X.shape
    if unit == "rows":
        m = int(math.floor(fraction * n))
        rows = rng.choice(n, size=m, replace=False)
        X[rows] = rng.chisquare(df, size=(m, p)) - df
    elif unit == "entries":
        m = int(math.floor(fraction * n * p))
        flat = rng.choice(n * p, size=m, replace=False)
        X.flat[flat] = rng.chisquare(df, size=m) - df
    else:
        raise ValidationError(f"unknown contamination unit {unit!r}")
    return Dataset(X, dataset.y, dataset.groups)


def generate_dataset(cfg: SimConfig, rep_seed: int) -> tuple[Dataset, GroundTruth]:
    rng = replication_rng(cfg.seed, rep_seed)
    groups = cfg.groups
    sigma = make_block_covariance(groups, cfg.a, cfg.b)
    factor = np.linalg.cholesky(sigma)
    X = rng.standard_normal((cfg.n, cfg.p)) @ factor.T
    truth = cfg.truth()
    p_normal = {"gaussian": 1.0, "t1": 0.0, "mix_cauchy": cfg.p_normal}[cfg.error_kind]
    eps = _errors(rng, cfg.n, p_normal)
    y = X @ truth.beta_star.values + eps
    data = Dataset(X, y, groups)
    if cfg.x_contamination > 0:
        data = contaminate_covariates(data, cfg.x_contamination, rng,
                                      cfg.contamination_df, cfg.contamination_unit)
    return data, truth


METRIC_NAMES = ("l2", "l1", "MS", "GS", "FPR", "FNR", "GFPR", "GFNR")


@dataclass
class MetricsReport:
    l2: float
    l1: float
    MS: float
    GS: float
    FPR: float
    FNR: float
    GFPR: float
    GFNR: float

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_NAMES)


def _rate(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


def selection_metrics(beta_hat: CoefficientVector, truth: GroundTruth) -> MetricsReport:
    """Estimation errors and selection rates (in percent) against the truth."""
    beta_star = truth.beta_star
    if beta_hat.values.shape != beta_star.values.shape:
        raise ValidationError("estimate and truth have different lengths")
    diff = beta_hat.values - beta_star.values
    p, J = beta_star.groups.p, beta_star.groups.n_groups
    I_hat = beta_hat.support()
    S_hat = beta_star.groups.support(beta_hat.values)
    I0, S = set(truth.I0), set(truth.S)
    return MetricsReport(
        l2=float(np.linalg.norm(diff)),
        l1=float(np.sum(np.abs(diff))),
        MS=float(len(I_hat)),
        GS=float(len(S_hat)),
        FPR=_rate(len(I_hat - I0), p - len(I0)),
        FNR=_rate(len(I0 - I_hat), len(I0)),
        GFPR=_rate(len(S_hat - S), J - len(S)),
        GFNR=_rate(len(S - S_hat), len(S)),
    )


@dataclass(frozen=True)
class MethodSpec:
    """One estimator column of an experiment table.

    ``stage="gp"`` tunes ``lam`` only (no thresholding); ``stage="ht"``
    tunes ``(lam, theta)`` jointly. ``grouped=False`` treats every
    coefficient as its own group. ``kind="oracle"`` returns the true
    coefficients and exists for harness checks.
    """

    loss: LossSpec = field(default_factory=LossSpec)
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    scheme: WeightScheme = field(default_factory=WeightScheme)
    stage: str = "gp"
    score_kind: str = "trimmed_mse"
    grouped: bool = True
    kind: str = "fit"
    label: str | None = None

    def __post_init__(self):
        if self.stage not in ("gp", "ht"):
            raise ValidationError(f"unknown stage {self.stage!r}")
        if self.kind not in ("fit", "oracle"):
            raise ValidationError(f"unknown method kind {self.kind!r}")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "oracle":
            return "Oracle"
        pen = {"lasso": "Lasso", "mcp": "MCP"}[self.penalty.kind]
        prefix = ("W" if self.scheme.kind != "unit" else "") + ("G" if self.grouped else "")
        stage = "-HT" if self.stage == "ht" else ""
        loss = {"least_squares": "LS", "huber": "Huber", "tukey": "Tukey",
                "cauchy": "Cauchy"}[self.loss.kind]
        score = "" if self.score_kind == "trimmed_mse" else " (MSE-CV)"
        return f"{prefix}{pen}{stage} {loss}{score}"

    def family(self):
        return (self.loss, self.penalty, self.scheme, self.grouped)


@dataclass
class ReplicationResult:
    rep: int
    metrics: dict[str, MetricsReport]
    selected: dict[str, tuple[float, float]]
    failures: dict[str, str]


@dataclass
class ExperimentReport:
    methods: list[str]
    replications: list[ReplicationResult]
    seconds: float = 0.0

    def values(self) -> NDArray[np.float64]:
        """Array of shape ``(reps, methods, 8)``; failed fits are NaN."""
        out = np.full((len(self.replications), len(self.methods), len(METRIC_NAMES)), np.nan)
        for r, rep in enumerate(self.replications):
            for m, name in enumerate(self.methods):
                if name in rep.metrics:
                    out[r, m] = rep.metrics[name].as_tuple()
        return out

    def means(self) -> NDArray[np.float64]:
        vals = self.values()
        with np.errstate(invalid="ignore"):
            return np.array([[_nanmean(vals[:, m, k]) for k in range(vals.shape[2])]
                             for m in range(vals.shape[1])])

    def standard_errors(self) -> NDArray[np.float64]:
        vals = self.values()
        out = np.full(vals.shape[1:], np.nan)
        for m in range(vals.shape[1]):
            for k in range(vals.shape[2]):
                col = vals[:, m, k][~np.isnan(vals[:, m, k])]
                if col.size > 1:
                    out[m, k] = float(np.std(col, ddof=1) / math.sqrt(col.size))
        return out

    def failure_counts(self) -> dict[str, int]:
        return {name: sum(name in rep.failures for rep in self.replications)
                for name in self.methods}

    def mean(self, method: str, metric: str) -> float:
        return float(self.means()[self.methods.index(method), METRIC_NAMES.index(metric)])

    def per_rep(self, method: str, metric: str) -> NDArray[np.float64]:
        return self.values()[:, self.methods.index(method), METRIC_NAMES.index(metric)]


def _nanmean(col):
    col = col[~np.isnan(col)]
    return float(np.mean(col)) if col.size else math.nan


def _cv_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(rep), 1]).generate_state(1)[0])


def run_replication(cfg: SimConfig, methods: Sequence[MethodSpec], grid: TuningGrid,
                    rep: int, config: SolverConfig | None = None) -> ReplicationResult:
    """Generate one data set and fit every method with its own cross-validation.

    Methods that differ only in stage or CV score share the fold fits;
    methods with the same weight scheme share the Huber group-lasso
    initializer. Neither shortcut changes any result.
    """
    config = config or SolverConfig()
    data, truth = generate_dataset(cfg, rep)
    cv_seed = _cv_seed(cfg.seed, rep)
    ht_thetas = tuple(t for t in grid.theta_values)
    metrics: dict[str, MetricsReport] = {}
    selected: dict[str, tuple[float, float]] = {}
    failures: dict[str, str] = {}

    families: dict = {}
    for m in methods:
        if m.kind == "oracle":
            metrics[m.name] = selection_metrics(truth.beta_star, truth)
            selected[m.name] = (math.nan, math.nan)
        else:
            families.setdefault(m.family(), []).append(m)

    caches: dict = {}
    for (loss, penalty, scheme, grouped), members in families.items():
        fit_data = data if grouped else Dataset(data.X, data.y, GroupStructure((1,) * data.p))
        cache = caches.setdefault((scheme, grouped), {})
        thetas = sorted(set(([0.0] if any(m.stage == "gp" for m in members) else [])
                            + (list(ht_thetas) if any(m.stage == "ht" for m in members) else [])))
        try:
            fits = cv_residuals(fit_data, scheme, loss, penalty, grid.lam_values, thetas,
                                grid.folds, config, cv_seed, cache)
        except SolverError as exc:
            for m in members:
                failures[m.name] = str(exc)
            continue
        max_support = None if grid.max_support_frac is None else grid.max_support_frac * data.n
        for m in members:
            cols = [thetas.index(0.0)] if m.stage == "gp" else [thetas.index(t) for t in ht_thetas]
            table = score_table(fits, m.score_kind, grid.trim_frac, max_support, cols)
            a, b = select_cell(table)
            lam, theta = grid.lam_values[a], thetas[cols[b]]
            try:
                step1 = cache.get(("full", lam))
                fit = two_step_fit(fit_data, scheme, loss, penalty, lam, config, step1)
                cache[("full", lam)] = fit.step1
            except SolverError as exc:
                failures[m.name] = str(exc)
                continue
            beta = hard_threshold(CoefficientVector(fit.beta_hat.values, data.groups), theta)
            metrics[m.name] = selection_metrics(beta, truth)
            selected[m.name] = (lam, theta)
    return ReplicationResult(rep, metrics, selected, failures)


def run_experiment(cfg: SimConfig, methods: Sequence[MethodSpec],
                   grid: TuningGrid | None = None, config: SolverConfig | None = None,
                   n_jobs: int = 1, progress=None) -> ExperimentReport:
    """Replicate ``cfg`` and aggregate the eight metrics per method.

    Replication ``r`` draws from a generator seeded by ``(cfg.seed, r)``, so
    results do not depend on ``n_jobs`` or on which replications run.
    """
    grid = grid or default_grid(cfg.n, cfg.p)
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ValidationError(f"method names must be unique, got {names}")
    start = time.perf_counter()
    if n_jobs == 1:
        reps = []
        for r in range(cfg.replications):
            reps.append(run_replication(cfg, methods, grid, r, config))
            if progress is not None:
                progress(r, reps[-1])
    else:
        from joblib import Parallel, delayed
        reps = Parallel(n_jobs=n_jobs)(delayed(run_replication)(cfg, methods, grid, r, config)
                                       for r in range(cfg.replications))
    for rep in reps:
        for name, msg in rep.failures.items():
            log.warning("replication %d, %s failed: %s", rep.rep, name, msg)
    return ExperimentReport(names, reps, time.perf_counter() - start)
