import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bilevel import simbench
from bilevel.estimator import TuningGrid
from bilevel.losses import LossSpec
from bilevel.model import CoefficientVector, Dataset, GroundTruth, GroupStructure, ValidationError
from bilevel.optimizer import SolverError
from bilevel.penalties import PenaltySpec
from bilevel.simbench import (
    METRIC_NAMES,
    MethodSpec,
    SimConfig,
    contaminate_covariates,
    example1,
    example2,
    example3,
    generate_dataset,
    make_block_covariance,
    run_experiment,
    selection_metrics,
)

SMALL_GRID = TuningGrid((0.05, 0.2, 0.8), (0.0, 0.3), folds=3)


def small_cfg(**kw):
    kw.setdefault("n", 40)
    return SimConfig(group_sizes=(3, 3, 4, 2), magnitudes=((2, 2, 0), (1.5, 0, 1.5)), **kw)


def test_covariance_entries():
    s = make_block_covariance(GroupStructure((4, 4, 6, 6, 5)), 0.8, 0.5)
    assert s[0, 1] == -0.8 and s[0, 4] == 0.4
    assert np.all(np.diag(s) == 1) and np.array_equal(s, s.T)
    s = make_block_covariance(GroupStructure((3, 3)), 0.5, 0.8)
    assert np.allclose(np.abs(s[:3, 3:]), 0.4)


@pytest.mark.parametrize("a", [0.8, 0.5])
@pytest.mark.parametrize("b", [0.8, 0.5])
def test_paper_parameter_pairs_are_positive_definite(a, b):
    s = make_block_covariance(GroupStructure((4, 5, 6, 6, 4, 5) + (5,) * 94), a, b)
    np.linalg.cholesky(s)


def test_invalid_correlation_rejected():
    with pytest.raises(ValidationError):
        make_block_covariance(GroupStructure((2, 2)), 1.0, 0.5)


def test_example_truths():
    t = example1().truth()
    assert len(t.S) == 5 and len(t.I0) == 25 and t.k == 25
    v = t.beta_star.values
    np.testing.assert_array_equal(v[:5], [3, -3, 3, -3, 3])
    t2 = example2("i").truth()
    assert 2 not in t2.I0 and {0, 1, 3} <= t2.I0
    assert example2("iii").p == 1000
    assert example3().n == 120 and example3().x_contamination == 0.2


def test_bad_spec_lengths():
    with pytest.raises(ValidationError):
        SimConfig(n=10, group_sizes=(2, 2), magnitudes=((1, 1, 1),))
    with pytest.raises(ValidationError):
        SimConfig(n=10, group_sizes=(2,), magnitudes=((1, 1), (1,)))


def test_sample_covariance_matches():
    cfg = SimConfig(n=100_000, group_sizes=(2, 3), magnitudes=(), a=0.8, b=0.5)
    data, _ = generate_dataset(cfg, 0)
    emp = np.cov(data.X, rowvar=False)
    assert np.max(np.abs(emp - make_block_covariance(cfg.groups, 0.8, 0.5))) < 3 / np.sqrt(cfg.n)


def test_null_gaussian_response_is_standard_normal():
    cfg = SimConfig(n=10_000, group_sizes=(2, 2), magnitudes=())
    data, _ = generate_dataset(cfg, 3)
    assert stats.kstest(data.y, "norm").pvalue > 1e-3


def test_mixture_at_one_is_gaussian():
    a, _ = generate_dataset(small_cfg(error_kind="gaussian"), 7)
    b, _ = generate_dataset(small_cfg(error_kind="mix_cauchy", p_normal=1.0), 7)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.X, b.X)


def test_t1_errors_are_heavy_tailed():
    cfg = SimConfig(n=20_000, group_sizes=(1,), magnitudes=(), error_kind="t1")
    y = generate_dataset(cfg, 0)[0].y
    assert stats.kstest(y, "cauchy").pvalue > 1e-3


def test_generation_is_seeded():
    a, _ = generate_dataset(small_cfg(error_kind="t1"), 2)
    b, _ = generate_dataset(small_cfg(error_kind="t1"), 2)
    c, _ = generate_dataset(small_cfg(error_kind="t1"), 3)
    assert np.array_equal(a.y, b.y) and not np.array_equal(a.y, c.y)


def test_contamination():
    rng = np.random.default_rng(0)
    d = Dataset(rng.standard_normal((120, 5)), rng.standard_normal(120), GroupStructure((5,)))
    same = contaminate_covariates(d, 0.0, 1)
    assert np.array_equal(same.X, d.X)
    c = contaminate_covariates(d, 0.2, 1)
    changed = np.any(c.X != d.X, axis=1)
    assert changed.sum() == 24 and np.all((c.X != d.X)[changed])
    assert np.array_equal(c.y, d.y)
    big = Dataset(np.zeros((20_000, 10)), np.zeros(20_000), GroupStructure((10,)))
    vals = contaminate_covariates(big, 0.5, 2).X
    vals = vals[np.any(vals != 0, axis=1)].ravel()
    assert abs(vals.mean()) < 0.05 and abs(vals.var() - 20) < 0.5
    e = contaminate_covariates(d, 0.2, 1, unit="entries")
    assert np.sum(e.X != d.X) == 120
    with pytest.raises(ValidationError):
        contaminate_covariates(d, 1.0, 1)


def test_metrics_examples():
    g = GroupStructure((3, 3))
    truth = GroundTruth(CoefficientVector(np.array([1.0, 1, 1, 0, 0, 0]), g))
    est = CoefficientVector(np.array([1.0, 1, 0, 0, 1, 0]), g)
    m = selection_metrics(est, truth)
    assert m.FPR == pytest.approx(100 / 3) and m.FNR == pytest.approx(100 / 3)
    exact = selection_metrics(truth.beta_star, truth)
    assert exact.as_tuple() == (0, 0, 3, 1, 0, 0, 0, 0)
    zero = selection_metrics(CoefficientVector.zeros(g), truth)
    assert (zero.FNR, zero.GFNR, zero.FPR, zero.GFPR, zero.MS, zero.GS) == (100, 100, 0, 0, 0, 0)


def test_metrics_zero_over_zero():
    g = GroupStructure((2,))
    truth = GroundTruth(CoefficientVector(np.ones(2), g))
    m = selection_metrics(CoefficientVector(np.ones(2), g), truth)
    assert m.FPR == 0 and m.GFPR == 0


@given(st.lists(st.sampled_from([0.0, 1.0, -2.0]), min_size=6, max_size=6),
       st.lists(st.sampled_from([0.0, 0.5]), min_size=6, max_size=6))
def test_metric_invariants(est, true):
    g = GroupStructure((2, 4))
    truth = GroundTruth(CoefficientVector(np.array(true), g))
    beta = CoefficientVector(np.array(est), g)
    m = selection_metrics(beta, truth)
    I_hat = beta.support()
    assert len(I_hat & truth.I0) + len(I_hat - truth.I0) == m.MS
    assert all(0 <= r <= 100 for r in (m.FPR, m.FNR, m.GFPR, m.GFNR))
    assert 0 <= m.MS <= 6 and 0 <= m.GS <= 2


def test_oracle_method_has_zero_error():
    rep = run_experiment(small_cfg(replications=1), [MethodSpec(kind="oracle")], SMALL_GRID)
    row = rep.means()[0]
    assert row[0] == row[1] == 0 and all(row[4:] == 0)


def test_experiment_layout_and_determinism():
    methods = [MethodSpec(LossSpec(k), PenaltySpec(p)) for k in ("ls", "huber", "cauchy")
               for p in ("lasso", "mcp")]
    cfg = small_cfg(replications=2, error_kind="t1")
    a = run_experiment(cfg, methods, SMALL_GRID)
    b = run_experiment(cfg, methods, SMALL_GRID)
    assert a.means().shape == (6, len(METRIC_NAMES))
    assert a.methods == ["GLasso LS", "GMCP LS", "GLasso Huber", "GMCP Huber",
                         "GLasso Cauchy", "GMCP Cauchy"]
    np.testing.assert_array_equal(a.values(), b.values())
    assert np.all(np.isfinite(a.standard_errors()))


def test_replications_do_not_depend_on_each_other():
    methods = [MethodSpec(LossSpec("huber"), PenaltySpec("mcp"), stage="ht")]
    two = run_experiment(small_cfg(replications=2), methods, SMALL_GRID)
    one = simbench.run_replication(small_cfg(replications=2), methods, SMALL_GRID, 1)
    assert two.replications[1].metrics == one.metrics


def test_method_names():
    assert MethodSpec(LossSpec("cauchy"), PenaltySpec("mcp"), simbench.WeightScheme("bounded"),
                      stage="ht").name == "WGMCP-HT Cauchy"
    assert MethodSpec(LossSpec("ls"), PenaltySpec("mcp"), grouped=False).name == "MCP LS"
    with pytest.raises(ValidationError):
        run_experiment(small_cfg(), [MethodSpec(), MethodSpec()], SMALL_GRID)


def test_failures_are_recorded(monkeypatch):
    real = simbench.two_step_fit

    def flaky(data, scheme, loss, penalty, lam, config=None, step1=None):
        if loss.kind == "cauchy":
            raise SolverError("forced")
        return real(data, scheme, loss, penalty, lam, config, step1)

    monkeypatch.setattr(simbench, "two_step_fit", flaky)
    methods = [MethodSpec(LossSpec("huber")), MethodSpec(LossSpec("cauchy"))]
    rep = run_experiment(small_cfg(replications=2), methods, SMALL_GRID)
    assert rep.failure_counts() == {"GMCP Huber": 0, "GMCP Cauchy": 2}
    assert np.isnan(rep.means()[1]).all() and np.isfinite(rep.means()[0]).all()
