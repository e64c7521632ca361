"""Command-line interface: ``fit``, ``cv``, ``simulate`` and ``pipeline``.

Settings come from built-in defaults, then an optional JSON config
(``--config``), then explicit flags. Exit codes: 0 success, 1 usage
error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .estimator import TuningGrid, cross_validate, default_grid, fit_two_stage
from .losses import LossSpec
from .model import GroundTruth, CoefficientVector, ValidationError, WeightScheme
from .optimizer import SolverConfig, SolverError
from .penalties import PenaltySpec

log = logging.getLogger("bilevel")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

LOSS_NAMES = {"ls": "least_squares", "huber": "huber", "tukey": "tukey", "cauchy": "cauchy"}
SCORE_NAMES = {"mse": "mse", "trimmed": "trimmed_mse"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every setting the CLI understands; JSON configs use these field names."""

    # data
    data: str | None = None
    response: str | None = None
    groups: str | None = None
    auto_groups: int | None = None
    truth: str | None = None
    out: str = "out"
    # model
    loss: str = "huber"
    alpha: float | None = None
    penalty: str = "mcp"
    mcp_b: float = 3.0
    weights: str = "unit"
    # tuning
    lambda_grid: list[float] | None = None
    theta_grid: list[float] | None = None
    n_lambda: int = 8
    n_theta: int = 5
    folds: int = 10
    trim: float = 0.2
    score: str = "trimmed"
    max_support_frac: float | None = None
    seed: int = 0
    # solver
    max_iters: int = 10000
    tol_obj: float = 1e-8
    tol_stat: float = 1e-6
    engine: str = "compiled"
    # simulate
    preset: str = "example1"
    error_kind: str = "gaussian"
    replications: int = 20
    n: int | None = None
    x_contamination: float | None = None
    contamination_unit: str = "rows"
    p_normal: float = 0.7
    methods: list[str] = field(default_factory=lambda: ["ls:lasso:gp", "ls:mcp:gp",
                                                          "huber:mcp:gp", "cauchy:mcp:gp"])
    # pipeline
    n_by_variance: int = 2000
    n_by_correlation: int = 500
    n_basis: int = 5
    n_splits: int = 10
    holdout: int = 6
    standardize: bool = True
    # output
    record_timings: bool = False

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(mapping) - names)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**mapping)

    def validate(self) -> None:
        """Build every spec once so bad settings surface as usage errors."""
        try:
            self.loss_spec(), self.penalty_spec(), self.scheme(), self.solver()
            self.grid(100, 10)
            for token in self.methods:
                parse_method(token)
        except ValidationError as exc:
            raise UsageError(str(exc)) from None

    def loss_spec(self) -> LossSpec:
        return LossSpec(LOSS_NAMES.get(self.loss, self.loss), self.alpha)

    def penalty_spec(self) -> PenaltySpec:
        return PenaltySpec(self.penalty, self.mcp_b)

    def scheme(self) -> WeightScheme:
        return WeightScheme.parse(self.weights)

    def solver(self) -> SolverConfig:
        return SolverConfig(max_iters=self.max_iters, tol_obj=self.tol_obj,
                            tol_stat=self.tol_stat, engine=self.engine)

    def grid(self, n: int, p: int) -> TuningGrid:
        if self.score not in SCORE_NAMES:
            raise UsageError(f"--score must be one of {sorted(SCORE_NAMES)}")
        kw = dict(folds=self.folds, trim_frac=self.trim, score_kind=SCORE_NAMES[self.score],
                  max_support_frac=self.max_support_frac)
        base = default_grid(n, p, self.n_lambda, self.n_theta, **kw)
        lam = tuple(sorted(self.lambda_grid)) if self.lambda_grid else base.lam_values
        theta = tuple(sorted(self.theta_grid)) if self.theta_grid else base.theta_values
        return TuningGrid(lam, theta, **kw)


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--loss", choices=sorted(LOSS_NAMES))
    common.add_argument("--alpha", type=float, help="loss tuning constant")
    common.add_argument("--penalty", choices=["lasso", "mcp"])
    common.add_argument("--mcp-b", dest="mcp_b", type=float)
    common.add_argument("--weights", help="unit or bounded:<c>")
    common.add_argument("--lambda-grid", dest="lambda_grid", type=_float_list)
    common.add_argument("--theta-grid", dest="theta_grid", type=_float_list)
    common.add_argument("--n-lambda", dest="n_lambda", type=int)
    common.add_argument("--n-theta", dest="n_theta", type=int)
    common.add_argument("--folds", type=int)
    common.add_argument("--trim", type=float)
    common.add_argument("--score", choices=sorted(SCORE_NAMES))
    common.add_argument("--max-support-frac", dest="max_support_frac", type=float)
    common.add_argument("--max-iters", dest="max_iters", type=int)
    common.add_argument("--engine", choices=["compiled", "reference"])
    common.add_argument("--record-timings", dest="record_timings", action="store_true",
                        help="add wall-clock timings to metadata (breaks byte-identical reruns)")

    data = argparse.ArgumentParser(add_help=False, argument_default=S)
    data.add_argument("--data", help="input CSV with header")
    data.add_argument("--response", help="name of the response column")
    data.add_argument("--groups", help="CSV with columns feature,group_id")
    data.add_argument("--auto-groups", dest="auto_groups", type=int,
                      help="consecutive groups of this size")

    parser = _Parser(prog="bilevel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", parents=[common, data], help="cross-validated two-stage fit")
    fit.add_argument("--truth", help="CSV feature,value of true coefficients", default=S)
    sub.add_parser("cv", parents=[common, data], help="cross-validation table only")

    sim = sub.add_parser("simulate", parents=[common], help="replicated simulation study")
    sim.add_argument("--preset", default=S, help="example1, example2i, example2ii, "
                                                  "example2iii or example3")
    sim.add_argument("--error-kind", dest="error_kind", default=S,
                     choices=["gaussian", "t1", "mix_cauchy"])
    sim.add_argument("--replications", type=int, default=S)
    sim.add_argument("--n", type=int, default=S)
    sim.add_argument("--x-contamination", dest="x_contamination", type=float, default=S)
    sim.add_argument("--contamination-unit", dest="contamination_unit", default=S,
                     choices=["rows", "entries"])
    sim.add_argument("--methods", type=_str_list, default=S,
                     help="comma list of loss:penalty:stage[:weights][:mse]")

    pipe = sub.add_parser("pipeline", parents=[common, data],
                          help="screen, spline-expand and evaluate on random splits")
    pipe.add_argument("--n-by-variance", dest="n_by_variance", type=int, default=S)
    pipe.add_argument("--n-by-correlation", dest="n_by_correlation", type=int, default=S)
    pipe.add_argument("--n-basis", dest="n_basis", type=int, default=S)
    pipe.add_argument("--n-splits", dest="n_splits", type=int, default=S)
    pipe.add_argument("--holdout", type=int, default=S)
    pipe.add_argument("--no-standardize", dest="standardize", action="store_false", default=S)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    given = vars(args).copy()
    given.pop("command", None)
    given.pop("verbose", None)
    merged: dict = {}
    path = given.pop("config", None)
    if path is not None:
        payload = io.read_json(path)
        if not isinstance(payload, dict):
            raise UsageError("config file must hold a JSON object")
        merged.update(payload)
    merged.update(given)
    return RunConfig.from_mapping(merged)


def parse_method(token: str):
    """``loss:penalty:stage[:weights][:mse|:trimmed][:nogroup]`` to a MethodSpec."""
    from .simbench import MethodSpec

    if token == "oracle":
        return MethodSpec(kind="oracle")
    parts = token.split(":")
    if len(parts) < 3:
        raise UsageError(f"method {token!r} needs at least loss:penalty:stage")
    loss, pen, stage, rest = parts[0], parts[1], parts[2], parts[3:]
    if loss not in LOSS_NAMES:
        raise UsageError(f"method {token!r}: unknown loss {loss!r}")
    scheme, score, grouped = WeightScheme(), "trimmed_mse", True
    i = 0
    while i < len(rest):
        part = rest[i]
        if part == "unit":
            scheme = WeightScheme()
        elif part == "bounded":
            c = rest[i + 1] if i + 1 < len(rest) else "4"
            scheme = WeightScheme.parse(f"bounded:{c}")
            i += 1
        elif part in SCORE_NAMES:
            score = SCORE_NAMES[part]
        elif part == "nogroup":
            grouped = False
        else:
            raise UsageError(f"method {token!r}: unknown option {part!r}")
        i += 1
    return MethodSpec(LossSpec(LOSS_NAMES[loss]), PenaltySpec(pen), scheme, stage, score, grouped)


def _load(cfg: RunConfig) -> io.LoadedData:
    if cfg.data is None or cfg.response is None:
        raise UsageError("--data and --response are required")
    if (cfg.groups is None) == (cfg.auto_groups is None):
        raise UsageError("give exactly one of --groups or --auto-groups")
    gmap = io.read_group_map(cfg.groups) if cfg.groups is not None else None
    return io.load_csv(cfg.data, cfg.response, gmap, cfg.auto_groups)


def _metadata(cfg: RunConfig, command: str, timings: dict, extra: dict | None = None) -> dict:
    meta = {"command": command, "seed": cfg.seed, "versions": io.versions(),
            "config": dataclasses.asdict(cfg)}
    if cfg.record_timings:
        meta["timings_seconds"] = timings
    if extra:
        meta.update(extra)
    return meta


def _read_truth(path, loaded: io.LoadedData) -> GroundTruth:
    header, body = io.read_table(path)
    if header[:1] != ["feature"] or "value" not in header:
        raise io.DataError(f"{path}: truth file needs columns feature,value")
    vi = header.index("value")
    vals = {row[0]: float(row[vi]) for row in body}
    unknown = set(vals) - set(loaded.features)
    if unknown:
        raise io.DataError(f"{path}: unknown feature(s) {sorted(unknown)[:5]}")
    beta = np.array([vals.get(f, 0.0) for f in loaded.features])
    return GroundTruth(CoefficientVector(beta, loaded.dataset.groups))


def cmd_fit(cfg: RunConfig) -> dict:
    from .simbench import selection_metrics

    t0 = time.perf_counter()
    loaded = _load(cfg)
    data = loaded.dataset
    truth = _read_truth(cfg.truth, loaded) if cfg.truth else None
    grid = cfg.grid(data.n, data.p)
    t1 = time.perf_counter()
    res = fit_two_stage(data, cfg.scheme(), cfg.loss_spec(), cfg.penalty_spec(), grid,
                        cfg.solver(), cfg.seed)
    t2 = time.perf_counter()
    out = Path(cfg.out)
    beta = res.beta_final.values
    io.write_coefficients(out / "coefficients.csv", loaded.features, loaded.group_ids, beta)
    io.write_cv_table(out / "cv_table.csv", grid.lam_values, grid.theta_values, res.cv_table)
    groups = sorted({loaded.group_ids[m] for m in np.flatnonzero(beta)},
                    key=io._group_sort_key(loaded.group_ids))
    report = {
        "lambda": res.lam_selected, "theta": res.theta_selected,
        "selected_groups": groups, "n_selected": int(np.count_nonzero(beta)),
        "converged": res.gp_fit.converged, "iterations": res.gp_fit.iterations,
        "stationarity_residual": res.gp_fit.stationarity_residual,
        "objective": res.gp_fit.objective,
    }
    if truth is not None:
        report["metrics"] = dataclasses.asdict(selection_metrics(res.beta_final, truth))
    io.write_json(out / "report.json", report)
    io.write_json(out / "metadata.json", _metadata(cfg, "fit", {"load": t1 - t0, "fit": t2 - t1}))
    return report


def cmd_cv(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    loaded = _load(cfg)
    data = loaded.dataset
    grid = cfg.grid(data.n, data.p)
    cv = cross_validate(data, cfg.scheme(), cfg.loss_spec(), cfg.penalty_spec(), grid,
                        cfg.solver(), cfg.seed)
    out = Path(cfg.out)
    io.write_cv_table(out / "cv_table.csv", grid.lam_values, grid.theta_values, cv.table)
    report = {"lambda": cv.lam, "theta": cv.theta, "failed_fold_fits": cv.fits.failures}
    io.write_json(out / "metadata.json",
                  _metadata(cfg, "cv", {"total": time.perf_counter() - t0}, {"selection": report}))
    return report


def cmd_simulate(cfg: RunConfig) -> dict:
    from .simbench import METRIC_NAMES, PRESETS, run_experiment

    if cfg.preset not in PRESETS:
        raise UsageError(f"unknown preset {cfg.preset!r}; choose from {sorted(PRESETS)}")
    kw = dict(replications=cfg.replications, seed=cfg.seed, p_normal=cfg.p_normal,
              contamination_unit=cfg.contamination_unit)
    if cfg.n is not None:
        kw["n"] = cfg.n
    if cfg.x_contamination is not None:
        kw["x_contamination"] = cfg.x_contamination
    sim = PRESETS[cfg.preset](error_kind=cfg.error_kind, **kw)
    methods = [parse_method(t) for t in cfg.methods]
    grid = cfg.grid(sim.n, sim.p)
    t0 = time.perf_counter()
    rep = run_experiment(sim, methods, grid, cfg.solver(),
                         progress=lambda r, _: log.info("replication %d done", r))
    out = Path(cfg.out)
    io.write_experiment_table(out / "table.csv", rep.methods, rep.means(), METRIC_NAMES)
    io.write_experiment_table(out / "table_se.csv", rep.methods, rep.standard_errors(),
                              METRIC_NAMES)
    per_rep = [(r.rep, name, *r.metrics[name].as_tuple())
               for r in rep.replications for name in rep.methods if name in r.metrics]
    io.write_csv(out / "replications.csv", ("rep", "method", *METRIC_NAMES), per_rep)
    report = {"failures": rep.failure_counts(),
              "selected": {str(r.rep): r.selected for r in rep.replications}}
    io.write_json(out / "report.json", report)
    io.write_json(out / "metadata.json",
                  _metadata(cfg, "simulate", {"total": time.perf_counter() - t0}))
    return report


def cmd_pipeline(cfg: RunConfig) -> dict:
    from .pipeline import run_pipeline

    if cfg.data is None or cfg.response is None:
        raise UsageError("--data and --response are required")
    # every feature is its own group before expansion
    loaded = io.load_csv(cfg.data, cfg.response, auto_group_size=1)
    X, y = np.asarray(loaded.dataset.X), np.asarray(loaded.dataset.y)
    n_keep = min(cfg.n_by_correlation, X.shape[1])
    n_var = min(max(cfg.n_by_variance, n_keep), X.shape[1])
    p_expanded = n_keep * cfg.n_basis
    grid = cfg.grid(len(y) - cfg.holdout, p_expanded)
    t0 = time.perf_counter()
    kept, outcomes = run_pipeline(X, y, n_var, n_keep, cfg.loss_spec(), cfg.penalty_spec(),
                                  cfg.scheme(), grid, cfg.n_basis, cfg.n_splits, cfg.holdout,
                                  cfg.seed, cfg.standardize, cfg.solver())
    out = Path(cfg.out)
    io.write_csv(out / "screened_features.csv", ("feature",), [(loaded.features[k],) for k in kept])
    io.write_csv(out / "splits.csv", ("split", "mse", "lambda", "theta", "n_groups", "n_coefs"),
                 [(o.split, o.mse, o.lam, o.theta, o.n_groups, o.n_coefs) for o in outcomes])
    io.write_csv(out / "residuals.csv", ("split", "row", "residual"),
                 [(o.split, int(r), float(e)) for o in outcomes
                  for r, e in zip(o.test_rows, o.residuals)])
    mses = np.array([o.mse for o in outcomes])
    report = {"mean_mse": float(mses.mean()), "median_mse": float(np.median(mses)),
              "n_splits": len(outcomes)}
    io.write_json(out / "report.json", report)
    io.write_json(out / "metadata.json",
                  _metadata(cfg, "pipeline", {"total": time.perf_counter() - t0}))
    return report


COMMANDS = {"fit": cmd_fit, "cv": cmd_cv, "simulate": cmd_simulate, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"bilevel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        cfg.validate()
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"bilevel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TypeError as exc:
        # wrong value types in a JSON config
        print(f"bilevel: error: bad configuration ({exc})", file=sys.stderr)
        return EXIT_USAGE
    except (io.DataError, ValidationError) as exc:
        print(f"bilevel: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"bilevel: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
