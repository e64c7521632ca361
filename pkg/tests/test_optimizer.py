import math

import numpy as np
import pytest

from bilevel.losses import LossSpec, objective_gradient
from bilevel.model import CoefficientVector, Dataset, GroupStructure, ValidationError, WeightScheme
from bilevel.optimizer import (
    Problem,
    SolverConfig,
    backtracking_search,
    composite_step,
    restricted_oracle_fit,
    solve_gp,
    two_step_fit,
)
from bilevel.penalties import PenaltySpec, q_gradient
from conftest import random_problem

UNIT = WeightScheme()
LS, HUBER, CAUCHY = LossSpec("ls"), LossSpec("huber"), LossSpec("cauchy")
LASSO, MCP = PenaltySpec("lasso"), PenaltySpec("mcp")


def sparse_problem(rng, n=50, sizes=(5, 5), active=(0,), noise=0.5, error="normal"):
    groups = GroupStructure(sizes)
    X = rng.standard_normal((n, groups.p))
    beta = np.zeros(groups.p)
    for j in active:
        beta[groups.slice(j)] = rng.choice([-1, 1], sizes[j]) * rng.uniform(1.5, 3, sizes[j])
    if error == "normal":
        eps = rng.standard_normal(n)
    else:
        eps = rng.standard_normal(n) / rng.standard_normal(n)
    return Dataset(X, X @ beta + noise * eps, groups), beta


@pytest.mark.parametrize("kw", [dict(R=0), dict(eta_shrink=1.0), dict(eta_grow=0.5),
                                dict(tol_obj=0), dict(engine="gpu"), dict(max_iters=0)])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        SolverConfig(**kw)


def test_composite_step_examples():
    d = Dataset(np.eye(2), np.zeros(2), GroupStructure((2,)))
    lam = 2.5 / math.sqrt(2)
    prob = Problem(d, UNIT, LS, LASSO, lam)
    out = composite_step(np.array([3.0, 4.0]), 1.0, prob, np.zeros(2))
    np.testing.assert_allclose(out, [1.5, 2.0], atol=1e-15)
    # zero gradient shrinks each group norm by eta * lam_j
    g = GroupStructure((2, 3))
    prob = Problem(Dataset(np.ones((3, 5)), np.zeros(3), g), UNIT, LS, LASSO, 0.1)
    beta = np.array([3.0, 4.0, 1.0, 2.0, 2.0])
    out = composite_step(beta, 0.5, prob, np.zeros(5))
    np.testing.assert_allclose(g.norms(out), g.norms(beta) - 0.5 * 0.1 * g.sqrt_sizes, rtol=1e-14)
    # small gradient at zero keeps zero
    grad = np.array([0.1, 0.0, 0.1, 0.1, 0.0])
    np.testing.assert_array_equal(composite_step(np.zeros(5), 7.0, prob, grad), 0)
    with pytest.raises(ValidationError):
        composite_step(beta, 0.0, prob, grad)


def test_composite_step_l1_rescale():
    g = GroupStructure((2,))
    prob = Problem(Dataset(np.eye(2), np.zeros(2), g), UNIT, LS, LASSO, 0.0)
    out = composite_step(np.array([3.0, -1.0]), 1.0, prob, np.zeros(2), R=2.0)
    np.testing.assert_allclose(out, [1.5, -0.5])


def test_backtracking_exact_quadratic():
    d = Dataset(np.ones((1, 1)), np.zeros(1), GroupStructure((1,)))
    prob = Problem(d, UNIT, LS, LASSO, 0.0)
    eta, cand, f, _ = backtracking_search(np.array([1.0]), 1.0, prob, SolverConfig())
    assert eta == 1.0 and cand[0] == 0.0 and f == 0.0


def test_backtracking_at_stationary_point(rng):
    data = random_problem(rng)
    fit = solve_gp(data, UNIT, LS, LASSO, 0.3, config=SolverConfig(tol_obj=1e-14, tol_stat=1e-12))
    prob = Problem(data, UNIT, LS, LASSO, 0.3)
    eta, cand, _, _ = backtracking_search(fit.beta_hat.values, 1e-3, prob, SolverConfig())
    assert eta == 1e-3
    np.testing.assert_allclose(cand, fit.beta_hat.values, atol=1e-9)


def test_backtracking_accepts_largest_step(rng):
    cfg = SolverConfig()
    for _ in range(20):
        data = random_problem(rng, scale=3.0)
        prob = Problem(data, UNIT, CAUCHY, MCP, 0.2)
        beta = rng.standard_normal(data.p)
        r = prob.residual(beta)
        f0, g0 = prob.smooth_value(beta, r), prob.smooth_grad(beta, r)

        def holds(eta):
            cand = composite_step(beta, eta, prob, g0)
            dd = cand - beta
            bound = f0 + g0 @ dd + dd @ dd / (2 * eta)
            return prob.smooth_value(cand, prob.residual(cand)) <= bound + 8 * np.finfo(float).eps * max(1, abs(f0))

        eta, _, _, _ = backtracking_search(beta, 64.0, prob, cfg, f0, g0)
        assert holds(eta)
        if eta < 64.0:
            assert not holds(eta / cfg.eta_shrink)


def test_large_lambda_gives_zero(rng):
    data = random_problem(rng)
    g0 = objective_gradient(data, UNIT, HUBER, CoefficientVector.zeros(data.groups))
    lam = float(np.max(data.groups.norms(g0) / data.groups.sqrt_sizes)) * 1.0001
    fit = solve_gp(data, UNIT, HUBER, MCP, lam)
    assert fit.converged and not fit.beta_hat.support() and fit.active_groups == set()


def test_group_lasso_matches_long_reference_run(rng):
    g = GroupStructure((2, 2))
    data = Dataset(rng.standard_normal((5, 4)), rng.standard_normal(5), g)
    fit = solve_gp(data, UNIT, LS, LASSO, 0.2)
    ref = solve_gp(data, UNIT, LS, LASSO, 0.2, config=SolverConfig(
        engine="reference", tol_obj=1e-16, tol_stat=1e-13, max_iters=200000, eta_grow=1.0,
        eta_init=0.01))
    assert abs(fit.objective - ref.objective) <= 1e-5


def test_huber_mcp_recovers_single_group():
    hits = 0
    for seed in range(100):
        data, _ = sparse_problem(np.random.default_rng(seed))
        fit = solve_gp(data, UNIT, HUBER, MCP, 0.3)
        hits += fit.active_groups == {0}
    assert hits >= 95


def _stationarity_check(data, loss, pen, lam, fit):
    prob = Problem(data, UNIT, loss, pen, lam)
    beta = fit.beta_hat
    grad = objective_gradient(data, UNIT, loss, beta) - q_gradient(pen, beta, lam)
    g = data.groups
    lam_j = g.sqrt_sizes * lam
    for j in range(g.n_groups):
        bj, gj = beta.values[g.slice(j)], grad[g.slice(j)]
        nb = np.linalg.norm(bj)
        if nb > 0:
            assert np.linalg.norm(gj + lam_j[j] * bj / nb) <= 1.5e-6
        else:
            assert np.linalg.norm(gj) <= lam_j[j] + 1.5e-6
    assert prob.stationarity(beta.values, prob.smooth_grad(beta.values, prob.residual(beta.values))) \
        == pytest.approx(fit.stationarity_residual, rel=1e-6, abs=1e-12)


@pytest.mark.parametrize("loss", [LS, HUBER, LossSpec("tukey"), CAUCHY])
@pytest.mark.parametrize("pen", [LASSO, MCP])
def test_converged_fits_are_certified(loss, pen, rng):
    for _ in range(3):
        data, _ = sparse_problem(rng, n=40, sizes=(3, 4, 2, 3), active=(0, 2))
        fit = solve_gp(data, UNIT, loss, pen, 0.15)
        assert fit.converged
        _stationarity_check(data, loss, pen, 0.15, fit)
        tr = np.array(fit.objective_trace)
        assert np.all(np.diff(tr) <= 1e-12 * np.maximum(1, np.abs(tr[:-1])))


def test_feasibility_with_tight_radius(rng):
    data, _ = sparse_problem(rng)
    fit = solve_gp(data, UNIT, LS, LASSO, 0.01, config=SolverConfig(R=1.0, max_iters=500))
    assert np.abs(fit.beta_hat.values).sum() <= 1.0 + 1e-9


def test_infeasible_init_rejected(rng):
    data = random_problem(rng)
    init = CoefficientVector(np.full(data.p, 10.0), data.groups)
    with pytest.raises(ValidationError):
        solve_gp(data, UNIT, LS, LASSO, 0.1, init, SolverConfig(R=1.0))


def test_convex_program_from_random_inits(rng):
    data = random_problem(rng, n=30)
    cfg = SolverConfig(tol_obj=1e-12, tol_stat=1e-8, max_iters=100000)
    objs = []
    for _ in range(10):
        init = CoefficientVector(rng.standard_normal(data.p) * 3, data.groups)
        objs.append(solve_gp(data, UNIT, LS, LASSO, 0.2, init, cfg).objective)
    assert max(objs) - min(objs) <= 1e-6


def test_engines_agree(rng):
    for loss, pen in [(LS, LASSO), (CAUCHY, MCP), (LossSpec("tukey"), MCP)]:
        data, _ = sparse_problem(rng, n=30, sizes=(2, 3, 4), active=(1,))
        for scheme in (UNIT, WeightScheme("bounded", 1.5)):
            a = solve_gp(data, scheme, loss, pen, 0.2, config=SolverConfig(engine="compiled"))
            b = solve_gp(data, scheme, loss, pen, 0.2, config=SolverConfig(engine="reference"))
            assert a.converged == b.converged
            assert a.objective == pytest.approx(b.objective, rel=1e-10, abs=1e-12)
            np.testing.assert_allclose(a.beta_hat.values, b.beta_hat.values, atol=1e-7)
            assert a.active_groups == b.active_groups


def test_deterministic(rng):
    data, _ = sparse_problem(rng)
    a = two_step_fit(data, UNIT, CAUCHY, MCP, 0.1)
    b = two_step_fit(data, UNIT, CAUCHY, MCP, 0.1)
    assert a.beta_hat.values.tobytes() == b.beta_hat.values.tobytes()
    assert a.objective_trace == b.objective_trace


def test_two_step_idempotent_for_step1_program(rng):
    data, _ = sparse_problem(rng)
    fit = two_step_fit(data, UNIT, HUBER, LASSO, 0.2)
    assert fit.step1.converged and fit.iterations <= 3


def test_two_step_descends_from_initializer():
    from bilevel.simbench import example1, generate_dataset

    data, _ = generate_dataset(example1(), 0)
    fit = two_step_fit(data, UNIT, CAUCHY, MCP, 0.13)
    prob = Problem(data, UNIT, CAUCHY, MCP, 0.13)
    assert fit.objective <= prob.objective(fit.step1.beta_hat.values)
    assert fit.objective_trace[0] == pytest.approx(prob.objective(fit.step1.beta_hat.values), rel=1e-12)


def test_two_step_helps_under_heavy_tails():
    wins = 0
    for seed in range(50):
        data, beta = sparse_problem(np.random.default_rng(seed), n=60, sizes=(4, 4, 4, 4),
                                    active=(0, 1), noise=1.0, error="cauchy")
        two = two_step_fit(data, UNIT, CAUCHY, MCP, 0.15)
        zero = solve_gp(data, UNIT, CAUCHY, MCP, 0.15)
        wins += np.linalg.norm(two.beta_hat.values - beta) <= np.linalg.norm(zero.beta_hat.values - beta) + 1e-9
    assert wins > 25


def test_step1_lambda_mismatch(rng):
    data = random_problem(rng)
    s1 = solve_gp(data, UNIT, HUBER, LASSO, 0.1)
    with pytest.raises(ValidationError):
        two_step_fit(data, UNIT, CAUCHY, MCP, 0.2, step1=s1)


def test_oracle_fit_normal_equations(rng):
    data = random_problem(rng, n=40)
    fit = restricted_oracle_fit(data, UNIT, LS, range(data.groups.n_groups),
                                SolverConfig(tol_obj=1e-15, tol_stat=1e-12, max_iters=100000))
    ols = np.linalg.solve(data.X.T @ data.X, data.X.T @ data.y)
    np.testing.assert_allclose(fit.beta_hat.values, ols, atol=1e-8)


def test_oracle_fit_exact_data(rng):
    g = GroupStructure((3, 3, 3))
    X = rng.standard_normal((30, 9))
    beta = np.r_[1.0, -2.0, 0.5, 0, 0, 0, 0, 0, 0]
    data = Dataset(X, X @ beta, g)
    fit = restricted_oracle_fit(data, UNIT, CAUCHY, {0, 2},
                                SolverConfig(tol_obj=1e-15, tol_stat=1e-12, max_iters=100000))
    np.testing.assert_allclose(fit.beta_hat.values, beta, atol=1e-8)
    assert fit.active_groups <= {0, 2}


def test_oracle_fit_beats_full_support():
    better = 0
    for seed in range(20):
        data, beta = sparse_problem(np.random.default_rng(seed), n=60, sizes=(4, 4, 4, 4, 4, 4),
                                    active=(0, 1), noise=1.0)
        o = restricted_oracle_fit(data, UNIT, HUBER, {0, 1})
        f = restricted_oracle_fit(data, UNIT, HUBER, range(6))
        better += np.linalg.norm(o.beta_hat.values - beta) < np.linalg.norm(f.beta_hat.values - beta)
    assert better >= 18


def test_oracle_fit_empty_support(rng):
    with pytest.raises(ValidationError):
        restricted_oracle_fit(random_problem(rng), UNIT, LS, set())
