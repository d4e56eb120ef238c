"""Solver benchmark: hand/KKT-derived optima, stationarity residuals, statuses.

Every constrained problem's reference solution comes from an independent
route: a dense KKT linear solve for equality QPs, closed-form projections for
inequality cases, or classical Lagrange-multiplier algebra. The solver must
match those within tolerance and report honestly re-evaluated violations.
"""

import numpy as np
import pytest

from layeredmpc.nlp import (
    NlpProblem,
    SolveOptions,
    STATUS_DIVERGED,
    STATUS_INFEASIBLE,
    STATUS_OPTIMAL,
    check_gradient,
    solve,
)


def quad_problem(a):
    a = np.asarray(a, dtype=float)
    return NlpProblem(n_vars=a.size, cost=lambda z: float(np.sum((z - a) ** 2)))


# ---------------------------------------------------------------------------
# unconstrained and bound-constrained


def test_unconstrained_quadratic():
    a = np.array([1.0, -2.0, 3.0])
    res = solve(quad_problem(a), np.zeros(3))
    assert res.status == STATUS_OPTIMAL
    assert np.allclose(res.primal, a, atol=1e-6)
    assert res.cost == pytest.approx(0.0, abs=1e-10)


def test_active_lower_bound():
    p = NlpProblem(n_vars=1, cost=lambda z: float((z[0] + 1.0) ** 2),
                   lower=np.array([0.0]), upper=np.array([10.0]))
    res = solve(p, np.array([5.0]))
    assert res.status == STATUS_OPTIMAL
    assert res.primal[0] == pytest.approx(0.0, abs=1e-9)


def test_rosenbrock():
    def rb(z):
        return float((1.0 - z[0]) ** 2 + 100.0 * (z[1] - z[0] ** 2) ** 2)

    p = NlpProblem(n_vars=2, cost=rb)
    res = solve(p, np.array([-1.2, 1.0]), SolveOptions(max_inner=400))
    assert res.status == STATUS_OPTIMAL
    assert np.allclose(res.primal, [1.0, 1.0], atol=1e-4)


# ---------------------------------------------------------------------------
# equality constraints


def test_split_unit_budget():
    # min x^2 + y^2 s.t. x + y = 1 -> (0.5, 0.5), cost 0.5
    p = NlpProblem(
        n_vars=2,
        cost=lambda z: float(z[0] ** 2 + z[1] ** 2),
        eq_constraints=lambda z: np.array([z[0] + z[1] - 1.0]),
    )
    res = solve(p, np.zeros(2))
    assert res.status == STATUS_OPTIMAL
    assert np.allclose(res.primal, [0.5, 0.5], atol=1e-6)
    assert res.cost == pytest.approx(0.5, abs=1e-6)
    assert res.max_eq_violation <= 1e-6
    # stationarity with the returned multiplier: grad f + lam * grad c = 0
    resid = 2.0 * res.primal + res.lam[0] * np.ones(2)
    assert np.max(np.abs(resid)) < 5e-4


def test_equality_qp_against_kkt_solve():
    rng = np.random.default_rng(5)
    M = rng.normal(size=(5, 5))
    Q = M @ M.T + 5.0 * np.eye(5)
    q = rng.normal(size=5)
    A = np.array([[1.0, 2.0, 0.0, -1.0, 1.0], [0.0, 1.0, 1.0, 1.0, -2.0]])
    b = np.array([1.0, -0.5])

    kkt = np.block([[Q, A.T], [A, np.zeros((2, 2))]])
    sol = np.linalg.solve(kkt, np.concatenate([-q, b]))
    z_star, nu_star = sol[:5], sol[5:]

    p = NlpProblem(
        n_vars=5,
        cost=lambda z: float(0.5 * z @ Q @ z + q @ z),
        eq_constraints=lambda z: A @ z - b,
    )
    res = solve(p, np.zeros(5))
    assert res.status == STATUS_OPTIMAL
    assert np.allclose(res.primal, z_star, atol=2e-5)
    assert res.max_eq_violation <= 1e-6
    assert np.allclose(res.lam, nu_star, atol=5e-3)


def test_circle_equality_nonconvex():
    # min x + y on the unit circle -> both coordinates at -sqrt(2)/2
    p = NlpProblem(
        n_vars=2,
        cost=lambda z: float(z[0] + z[1]),
        eq_constraints=lambda z: np.array([z[0] ** 2 + z[1] ** 2 - 1.0]),
    )
    res = solve(p, np.array([0.1, -0.9]))
    s = -np.sqrt(0.5)
    assert res.status == STATUS_OPTIMAL
    assert np.allclose(res.primal, [s, s], atol=1e-5)
    assert res.cost == pytest.approx(-np.sqrt(2.0), abs=1e-5)
    # Lagrange algebra: 1 + 2 lam s = 0 -> lam = 1/sqrt(2)
    assert res.lam[0] == pytest.approx(1.0 / np.sqrt(2.0), abs=5e-3)


# ---------------------------------------------------------------------------
# inequality constraints


def test_lower_bounded_line():
    # min x s.t. x >= 2 within [0, 10] -> 2
    p = NlpProblem(
        n_vars=1,
        cost=lambda z: float(z[0]),
        ineq_constraints=lambda z: np.array([2.0 - z[0]]),
        lower=np.array([0.0]), upper=np.array([10.0]),
    )
    res = solve(p, np.array([7.0]))
    assert res.status == STATUS_OPTIMAL
    assert res.primal[0] == pytest.approx(2.0, abs=1e-6)
    assert res.max_ineq_violation <= 1e-6


def test_halfspace_projection():
    # min ||z - (2,2)||^2 s.t. x + y <= 1: projection gives (0.5, 0.5)
    p = NlpProblem(
        n_vars=2,
        cost=lambda z: float(np.sum((z - 2.0) ** 2)),
        ineq_constraints=lambda z: np.array([z[0] + z[1] - 1.0]),
    )
    res = solve(p, np.zeros(2))
    assert res.status == STATUS_OPTIMAL
    assert np.allclose(res.primal, [0.5, 0.5], atol=1e-6)


def test_disc_constrained_target():
    # min (x-3)^2 + y^2 s.t. x^2 + y^2 <= 1 -> (1, 0)
    p = NlpProblem(
        n_vars=2,
        cost=lambda z: float((z[0] - 3.0) ** 2 + z[1] ** 2),
        ineq_constraints=lambda z: np.array([z[0] ** 2 + z[1] ** 2 - 1.0]),
    )
    res = solve(p, np.array([0.0, 0.5]))
    assert res.status == STATUS_OPTIMAL
    assert np.allclose(res.primal, [1.0, 0.0], atol=1e-5)


def test_mixed_equality_inequality():
    # min x^2 + y^2 s.t. x + y = 1 and x >= 0.8 -> (0.8, 0.2)
    p = NlpProblem(
        n_vars=2,
        cost=lambda z: float(z[0] ** 2 + z[1] ** 2),
        eq_constraints=lambda z: np.array([z[0] + z[1] - 1.0]),
        ineq_constraints=lambda z: np.array([0.8 - z[0]]),
    )
    res = solve(p, np.zeros(2))
    assert res.status == STATUS_OPTIMAL
    assert np.allclose(res.primal, [0.8, 0.2], atol=2e-5)
    assert res.cost == pytest.approx(0.68, abs=1e-4)


def test_inactive_inequality_ignored():
    # same as the split-budget problem; x >= -5 never binds
    p = NlpProblem(
        n_vars=2,
        cost=lambda z: float(z[0] ** 2 + z[1] ** 2),
        eq_constraints=lambda z: np.array([z[0] + z[1] - 1.0]),
        ineq_constraints=lambda z: np.array([-5.0 - z[0]]),
    )
    res = solve(p, np.zeros(2))
    assert res.status == STATUS_OPTIMAL
    assert np.allclose(res.primal, [0.5, 0.5], atol=1e-6)
    assert res.mu[0] == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------------------
# statuses and bookkeeping


def test_infeasible_equalities_detected():
    p = NlpProblem(
        n_vars=1,
        cost=lambda z: 0.0,
        eq_constraints=lambda z: np.array([z[0], z[0] - 1.0]),
    )
    res = solve(p, np.array([0.3]))
    assert res.status == STATUS_INFEASIBLE
    assert res.max_eq_violation > 0.1


def test_overflowing_cost_reports_diverged():
    p = NlpProblem(n_vars=1, cost=lambda z: float(np.exp(z[0])))
    with np.errstate(over="ignore"):
        res = solve(p, np.array([800.0]))
    assert res.status == STATUS_DIVERGED


def test_nonfinite_start_reports_diverged():
    p = quad_problem(np.zeros(2))
    res = solve(p, np.array([np.nan, 0.0]))
    assert res.status == STATUS_DIVERGED
    assert res.iterations == 0


def test_outer_violation_monotone_on_benchmarks():
    problems = [
        (NlpProblem(n_vars=2, cost=lambda z: float(z[0] ** 2 + z[1] ** 2),
                    eq_constraints=lambda z: np.array([z[0] + z[1] - 1.0])), np.zeros(2)),
        (NlpProblem(n_vars=2, cost=lambda z: float(np.sum((z - 2.0) ** 2)),
                    ineq_constraints=lambda z: np.array([z[0] + z[1] - 1.0])), np.zeros(2)),
        (NlpProblem(n_vars=2, cost=lambda z: float(z[0] + z[1]),
                    eq_constraints=lambda z: np.array([z[0] ** 2 + z[1] ** 2 - 1.0])),
         np.array([0.1, -0.9])),
    ]
    for p, z0 in problems:
        res = solve(p, z0)
        hist = np.array(res.viol_history)
        assert np.all(np.diff(hist) <= 1e-8)


def test_reported_violations_match_re_evaluation():
    p = NlpProblem(
        n_vars=2,
        cost=lambda z: float(z[0] ** 2 + z[1] ** 2),
        eq_constraints=lambda z: np.array([z[0] + z[1] - 1.0]),
        ineq_constraints=lambda z: np.array([0.8 - z[0]]),
    )
    res = solve(p, np.zeros(2))
    e = abs(res.primal[0] + res.primal[1] - 1.0)
    g = max(0.8 - res.primal[0], 0.0)
    assert res.max_eq_violation == pytest.approx(e, abs=1e-15)
    assert res.max_ineq_violation == pytest.approx(g, abs=1e-15)


def test_solver_is_deterministic():
    p = NlpProblem(
        n_vars=2,
        cost=lambda z: float(z[0] ** 2 + z[1] ** 2),
        eq_constraints=lambda z: np.array([z[0] + z[1] - 1.0]),
    )
    a = solve(p, np.zeros(2))
    b = solve(p, np.zeros(2))
    assert np.array_equal(a.primal, b.primal)
    assert a.iterations == b.iterations
    assert a.cost == b.cost


def test_multiplier_warm_start_accepted():
    p = NlpProblem(
        n_vars=2,
        cost=lambda z: float(z[0] ** 2 + z[1] ** 2),
        eq_constraints=lambda z: np.array([z[0] + z[1] - 1.0]),
    )
    cold = solve(p, np.zeros(2))
    warm = solve(p, cold.primal, lam0=cold.lam, mu0=cold.mu, rho0=cold.rho)
    assert warm.status == STATUS_OPTIMAL
    assert warm.iterations <= cold.iterations
    assert np.allclose(warm.primal, [0.5, 0.5], atol=1e-6)


def test_fused_batch_is_used_and_agrees():
    calls = {"fused": 0}

    def fused(Z):
        calls["fused"] += 1
        costs = np.sum((Z - np.array([1.0, 2.0])) ** 2, axis=1)
        eqs = (Z[:, :1] + Z[:, 1:2]) - 1.0
        return costs, eqs, np.empty((Z.shape[0], 0))

    plain = NlpProblem(
        n_vars=2,
        cost=lambda z: float(np.sum((z - np.array([1.0, 2.0])) ** 2)),
        eq_constraints=lambda z: np.array([z[0] + z[1] - 1.0]),
    )
    fused_p = NlpProblem(
        n_vars=2,
        cost=plain.cost,
        eq_constraints=plain.eq_constraints,
        fused_batch=fused,
    )
    a = solve(plain, np.zeros(2))
    b = solve(fused_p, np.zeros(2))
    assert calls["fused"] > 0
    assert np.array_equal(a.primal, b.primal)
    assert a.status == b.status == STATUS_OPTIMAL


def test_init_outside_bounds_is_projected():
    p = NlpProblem(n_vars=1, cost=lambda z: float((z[0] - 5.0) ** 2),
                   lower=np.array([0.0]), upper=np.array([2.0]))
    res = solve(p, np.array([100.0]))
    assert res.status == STATUS_OPTIMAL
    assert res.primal[0] == pytest.approx(2.0, abs=1e-9)


# ---------------------------------------------------------------------------
# gradient checking


def test_check_gradient_quadratic():
    f = lambda z: float(np.sum(z * z))
    assert check_gradient(f, np.array([1.0, -2.0, 0.5])) <= 1e-6


def test_check_gradient_sines():
    f = lambda z: float(np.sum(np.sin(z)))
    assert check_gradient(f, np.array([0.3, 1.1, -0.7])) <= 1e-5


def test_check_gradient_constant():
    f = lambda z: 3.14
    assert check_gradient(f, np.zeros(4)) <= 1e-12
