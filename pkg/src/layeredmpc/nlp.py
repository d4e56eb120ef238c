"""Constrained nonlinear programming via an augmented Lagrangian.

Equality and inequality constraints are folded into a smooth penalty with
multiplier estimates (squared-hinge form for inequalities); the unconstrained
subproblems go to a bounded quasi-Newton method with central finite-difference
gradients. Problems may supply a fused batch evaluator so the whole
finite-difference stencil costs one vectorized call — this is what makes
shooting transcriptions affordable without analytic derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import Bounds, minimize

Array = np.ndarray

STATUS_OPTIMAL = "optimal-tolerance-met"
STATUS_MAX_ITER = "max-iterations"
STATUS_INFEASIBLE = "infeasible-detected"
STATUS_DIVERGED = "diverged"

_BIG = 1e40


@dataclass
class NlpProblem:
    """min cost(z) s.t. eq(z) = 0, ineq(z) <= 0, lower <= z <= upper.

    ``fused_batch(Z)`` (optional) evaluates a (B, n) stack of decision vectors
    in one shot, returning (costs (B,), eqs (B, m_eq), ineqs (B, m_ineq)).
    Without it the three scalar callables are looped per row.
    """

    n_vars: int
    cost: Callable[[Array], float]
    eq_constraints: Callable[[Array], Array] | None = None
    ineq_constraints: Callable[[Array], Array] | None = None
    lower: Array | None = None
    upper: Array | None = None
    fused_batch: Callable[[Array], tuple[Array, Array, Array]] | None = None

    def __post_init__(self):
        if self.lower is None:
            self.lower = np.full(self.n_vars, -np.inf)
        if self.upper is None:
            self.upper = np.full(self.n_vars, np.inf)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)

    def eval_row(self, z: Array) -> tuple[float, Array, Array]:
        c = float(self.cost(z))
        e = np.atleast_1d(np.asarray(self.eq_constraints(z), dtype=float)) \
            if self.eq_constraints is not None else np.empty(0)
        g = np.atleast_1d(np.asarray(self.ineq_constraints(z), dtype=float)) \
            if self.ineq_constraints is not None else np.empty(0)
        return c, e, g

    def eval_batch(self, Z: Array) -> tuple[Array, Array, Array]:
        if self.fused_batch is not None:
            costs, eqs, ineqs = self.fused_batch(Z)
            return (
                np.asarray(costs, dtype=float),
                np.asarray(eqs, dtype=float).reshape(Z.shape[0], -1),
                np.asarray(ineqs, dtype=float).reshape(Z.shape[0], -1),
            )
        rows = [self.eval_row(z) for z in Z]
        costs = np.array([r[0] for r in rows])
        eqs = np.stack([r[1] for r in rows]) if rows else np.empty((0, 0))
        ineqs = np.stack([r[2] for r in rows]) if rows else np.empty((0, 0))
        return costs, eqs, ineqs


@dataclass(frozen=True)
class SolveOptions:
    fd_step: float = 1e-6
    tol_feas: float = 1e-6
    tol_grad: float = 1e-5
    max_outer: int = 30
    max_inner: int = 80
    rho_init: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e8
    multiplier_cap: float = 1e8


@dataclass
class SolveResult:
    """Violations are re-evaluated at ``primal``, never taken from internals.

    Multipliers and the final penalty are returned so receding-horizon callers
    can warm-start the next solve; ``viol_history`` records the true max
    violation after each outer iteration.
    """

    status: str
    primal: Array
    cost: float
    max_eq_violation: float
    max_ineq_violation: float
    iterations: int
    lam: Array = field(default_factory=lambda: np.empty(0))
    mu: Array = field(default_factory=lambda: np.empty(0))
    rho: float = 0.0
    viol_history: list[float] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return max(self.max_eq_violation, self.max_ineq_violation) <= 1e-6


def _al_values(costs: Array, eqs: Array, ineqs: Array,
               lam: Array, mu: Array, rho: float) -> Array:
    """Augmented Lagrangian for a batch of rows."""
    val = costs.copy()
    if eqs.shape[-1]:
        val = val + eqs @ lam + 0.5 * rho * np.sum(eqs * eqs, axis=-1)
    if ineqs.shape[-1]:
        s = np.maximum(0.0, mu + rho * ineqs)
        val = val + (np.sum(s * s, axis=-1) - np.sum(mu * mu)) / (2.0 * rho)
    return val


def solve(
    p: NlpProblem,
    x_init: Array,
    opts: SolveOptions = SolveOptions(),
    lam0: Array | None = None,
    mu0: Array | None = None,
    rho0: float | None = None,
) -> SolveResult:
    """Augmented-Lagrangian solve with multiplier warm starts.

    Outer iterations update multipliers (and grow the penalty tenfold when
    the violation stalls); inner subproblems run bounded L-BFGS with central
    finite-difference gradients evaluated as one fused batch per call.
    """
    n = p.n_vars
    z = np.clip(np.asarray(x_init, dtype=float), p.lower, p.upper)
    if not np.all(np.isfinite(z)):
        return SolveResult(
            status=STATUS_DIVERGED, primal=z, cost=float("nan"),
            max_eq_violation=float("nan"), max_ineq_violation=float("nan"),
            iterations=0,
        )
    _, e0, g0 = p.eval_row(z)
    me, mi = e0.size, g0.size

    lam = np.zeros(me) if lam0 is None or np.asarray(lam0).size != me \
        else np.asarray(lam0, dtype=float).copy()
    mu = np.zeros(mi) if mu0 is None or np.asarray(mu0).size != mi \
        else np.maximum(np.asarray(mu0, dtype=float), 0.0)
    rho = float(rho0) if rho0 is not None and rho0 > 0 else opts.rho_init

    h = opts.fd_step
    stencil = np.zeros((2 * n + 1, n))
    stencil[1:n + 1] = h * np.eye(n)
    stencil[n + 1:] = -h * np.eye(n)

    def al_fun_and_grad(zz: Array) -> tuple[float, Array]:
        Z = zz[None, :] + stencil
        costs, eqs, ineqs = p.eval_batch(Z)
        vals = _al_values(costs, eqs, ineqs, lam, mu, rho)
        vals = np.where(np.isfinite(vals), vals, _BIG)
        grad = (vals[1:n + 1] - vals[n + 1:]) / (2.0 * h)
        return float(vals[0]), grad

    bounds = Bounds(p.lower, p.upper)
    status = STATUS_MAX_ITER
    viol_history: list[float] = []
    stall = 0
    prev_viol = np.inf
    outer_done = 0

    for outer in range(opts.max_outer):
        outer_done = outer + 1
        res = minimize(
            al_fun_and_grad, z, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": opts.max_inner, "ftol": 1e-14,
                     "gtol": 0.1 * opts.tol_grad},
        )
        z = np.clip(res.x, p.lower, p.upper)
        if not np.all(np.isfinite(z)):
            status = STATUS_DIVERGED
            z = np.where(np.isfinite(z), z, 0.0)
            break
        cost_z, e, g = p.eval_row(z)
        viol = 0.0
        if me:
            viol = max(viol, float(np.max(np.abs(e))))
        if mi:
            viol = max(viol, float(np.max(np.maximum(g, 0.0))))
        viol_history.append(viol)

        if not (np.isfinite(cost_z) and np.all(np.isfinite(e)) and np.all(np.isfinite(g))):
            status = STATUS_DIVERGED
            break

        # first-order multiplier update, then optimality test at the new estimates
        if me:
            lam = np.clip(lam + rho * e, -opts.multiplier_cap, opts.multiplier_cap)
        if mi:
            mu = np.clip(np.maximum(0.0, mu + rho * g), 0.0, opts.multiplier_cap)
        _, grad = al_fun_and_grad(z)
        pg = float(np.max(np.abs(z - np.clip(z - grad, p.lower, p.upper)))) if n else 0.0

        if viol <= opts.tol_feas and pg <= opts.tol_grad:
            status = STATUS_OPTIMAL
            break

        if viol > 0.25 * prev_viol and viol > opts.tol_feas:
            if rho >= opts.rho_max and viol > 0.99 * prev_viol:
                stall += 1
                if stall >= 2:
                    status = STATUS_INFEASIBLE
                    break
            rho = min(rho * opts.rho_growth, opts.rho_max)
        else:
            stall = 0
        prev_viol = min(prev_viol, viol)

    cost_z, e, g = p.eval_row(z)
    max_eq = float(np.max(np.abs(e))) if me else 0.0
    max_in = float(np.max(np.maximum(g, 0.0))) if mi else 0.0
    if not (np.isfinite(cost_z) and np.isfinite(max_eq) and np.isfinite(max_in)):
        status = STATUS_DIVERGED
    return SolveResult(
        status=status,
        primal=z,
        cost=float(cost_z),
        max_eq_violation=max_eq,
        max_ineq_violation=max_in,
        iterations=outer_done,
        lam=lam,
        mu=mu,
        rho=rho,
        viol_history=viol_history,
    )


def check_gradient(f: Callable[[Array], float], x: Array, step: float = 1e-6) -> float:
    """Max discrepancy between the solver's stencil and a coarser one.

    Both are central differences; the reference uses a 100x larger step, so
    agreement certifies the implementation rather than the truncation error.
    """
    x = np.asarray(x, dtype=float)
    n = x.size

    def central(hh: float) -> Array:
        g = np.zeros(n)
        for i in range(n):
            dx = np.zeros(n)
            dx[i] = hh
            g[i] = (f(x + dx) - f(x - dx)) / (2.0 * hh)
        return g

    return float(np.max(np.abs(central(step) - central(100.0 * step)))) if n else 0.0
