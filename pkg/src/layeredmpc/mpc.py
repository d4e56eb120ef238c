"""Fixed-mode MPC transcription and solving.

Multiple-shooting transcription of a mode schedule: decision variables are all
node states and inputs, dynamics are equality constraints (integration inside
a domain, reset maps at transitions, which consume no time), guard contact is
an equality on the guard function, and the other guards of each domain are
avoided strictly. The robust variant tightens avoid sets by the tube
diameter, shrinks the input box by the low-level controller's budget, and adds
a virtual node constrained past the contact guard so the whole disturbance
tube crosses it.

Everything funnels into one fused batch evaluator so the finite-difference
stencil of the NLP solver costs a single vectorized rollout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm, solve_discrete_are

from . import nlp
from .hybridsys import FlowConfig, Guard, HybridSystem, flow_fixed, guard_value
from .tubes import TubeModel, combined_diam

Array = np.ndarray

EPS_STRICT = 1e-6


class ScheduleError(ValueError):
    """Schedule inconsistent with the system graph or its own indices."""


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ModeSchedule:
    """Node-indexed mode assignment plus the guard fired at each transition.

    ``modes[k]`` is the mode of node k for k in [0, N]; ``guards[k] = g``
    marks node k as the last node of its domain, with the reset of guard g
    mapping node k to node k+1 (no time passes on that edge). Transitions are
    recorded explicitly rather than inferred from mode changes because a guard
    may map a mode to itself (e.g. a bounce).
    """

    modes: tuple[str, ...]
    guards: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.modes) < 3:
            raise ScheduleError("need at least N = 2 (three nodes)")
        for k in self.guards:
            if not (0 <= k < self.horizon):
                raise ScheduleError(f"guard index {k} outside [0, N-1]")

    @property
    def horizon(self) -> int:
        return len(self.modes) - 1

    @property
    def guard_nodes(self) -> list[int]:
        return sorted(self.guards)

    def is_all_final(self, final_mode: str) -> bool:
        return not self.guards and all(m == final_mode for m in self.modes)

    def segments(self) -> list[tuple[str, int, int, str | None]]:
        """(mode, first node, last node, outgoing guard or None) per domain."""
        segs = []
        start = 0
        for k in self.guard_nodes:
            segs.append((self.modes[start], start, k, self.guards[k]))
            start = k + 1
        segs.append((self.modes[start], start, self.horizon, None))
        return segs

    def validate_against(self, system: HybridSystem) -> None:
        for mode, start, end, gid in self.segments():
            for k in range(start, end + 1):
                if self.modes[k] != mode:
                    raise ScheduleError(f"mode changes inside a segment at node {k}")
            if gid is not None:
                g = system.guards.get(gid)
                if g is None:
                    raise ScheduleError(f"unknown guard {gid}")
                if g.source_mode != mode:
                    raise ScheduleError(f"guard {gid} does not leave mode {mode}")
                if self.modes[end + 1] != g.target_mode:
                    raise ScheduleError(f"guard {gid} does not enter {self.modes[end + 1]}")
            if mode not in system.modes:
                raise ScheduleError(f"unknown mode {mode}")


def all_final_schedule(system: HybridSystem, N: int) -> ModeSchedule:
    return ModeSchedule(modes=(system.final_mode,) * (N + 1))


def shift_schedule(schedule: ModeSchedule, event_guard: str | None = None) -> ModeSchedule:
    """Advance the schedule one recompute period.

    Without an event: drop node 0 and append a node in the tail mode. With an
    event: additionally purge every remaining node of the impacted leading
    domain (virtual node included), appending that many tail nodes, so the
    plan resumes in the post-reset domain.
    """
    tail = schedule.modes[-1]
    if event_guard is None:
        drop = 1
    else:
        if not schedule.guards:
            raise ScheduleError("event shift on a schedule with no transitions")
        k1 = schedule.guard_nodes[0]
        if schedule.guards[k1] != event_guard:
            raise ScheduleError(
                f"impact of {event_guard} but schedule expects {schedule.guards[k1]}"
            )
        drop = k1 + 1
    modes = schedule.modes[drop:] + (tail,) * drop
    guards = {k - drop: g for k, g in schedule.guards.items() if k >= drop}
    return ModeSchedule(modes=modes, guards=guards)


def retime_schedule(schedule: ModeSchedule, delta: int) -> ModeSchedule:
    """Move every transition ``delta`` nodes later (or earlier if negative).

    Keeps the horizon and the node gaps between transitions; the head (or
    tail) pads with the first (or last) mode. Raises when a transition would
    leave the interior of the horizon.
    """
    if delta == 0:
        return schedule
    N = schedule.horizon
    guards = {k + delta: g for k, g in schedule.guards.items()}
    if guards and not all(1 <= k <= N - 1 for k in guards):
        raise ScheduleError(f"retime by {delta} pushes a transition off the horizon")
    modes = tuple(schedule.modes[min(max(j - delta, 0), N)]
                  for j in range(N + 1))
    return ModeSchedule(modes=modes, guards=guards)


def node_times(schedule: ModeSchedule, dt_d: float) -> Array:
    """Planned timestamp of each node; reset edges take zero time."""
    t = np.zeros(schedule.horizon + 1)
    for k in range(schedule.horizon):
        t[k + 1] = t[k] + (0.0 if k in schedule.guards else dt_d)
    return t


# ---------------------------------------------------------------------------
# terminal ingredients


@dataclass(frozen=True)
class TerminalIngredients:
    """Quadratic terminal cost x'Px, feedback u = -Kx, level set {x'Px <= c_f}."""

    P: Array
    K: Array
    c_f: float


def terminal_control(ti: TerminalIngredients, lo: Array, hi: Array, x: Array) -> Array:
    u = -(x @ ti.K.T)
    return np.clip(u, lo, hi)


def _linearize(system: HybridSystem, mode_id: str, nx: int, nu: int, step: float = 1e-5):
    f = system.mode(mode_id).vector_field
    A = np.zeros((nx, nx))
    B = np.zeros((nx, nu))
    x0, u0 = np.zeros(nx), np.zeros(nu)
    for i in range(nx):
        d = np.zeros(nx)
        d[i] = step
        A[:, i] = (f(x0 + d, u0) - f(x0 - d, u0)) / (2.0 * step)
    for i in range(nu):
        d = np.zeros(nu)
        d[i] = step
        B[:, i] = (f(x0, u0 + d) - f(x0, u0 - d)) / (2.0 * step)
    return A, B


def make_terminal(
    system: HybridSystem,
    Q: Array,
    R: Array,
    dt_d: float,
    substeps: int = 10,
    c_init: float = 100.0,
    n_samples: int = 200,
    seed: int = 0,
    max_halvings: int = 60,
    inflate: float = 1.2,
) -> TerminalIngredients:
    """LQR-based terminal ingredients for the final mode.

    Linearizes the final-mode dynamics at the origin, discretizes with a
    zero-order hold over dt_d, solves the discrete Riccati equation for P and
    the gain K, then halves a candidate level c_f until, on sampled points of
    the level set, (i) one nonlinear step under the clamped feedback decreases
    x'Px by at least the stage cost and (ii) every guard stays strictly away.

    The returned P is the Riccati solution scaled by ``inflate``: for the
    exact LQR pair the one-step decrease holds with equality, leaving zero
    margin for the nonlinear terms, so any perturbation shrinks the verified
    level to nothing. Scaling P by beta > 1 buys a margin of
    (beta - 1) * stage cost, which grows with the level, at the price of a
    slightly conservative terminal penalty. K stays the unscaled LQR gain.
    """
    mode = system.mode(system.final_mode)
    nx, nu = Q.shape[0], R.shape[0]
    A, B = _linearize(system, system.final_mode, nx, nu)
    blk = np.zeros((nx + nu, nx + nu))
    blk[:nx, :nx] = A * dt_d
    blk[:nx, nx:] = B * dt_d
    eblk = expm(blk)
    Ad, Bd = eblk[:nx, :nx], eblk[:nx, nx:]

    if inflate < 1.0:
        raise ValueError("inflate must be >= 1")
    P = solve_discrete_are(Ad, Bd, Q, R)
    if not np.all(np.isfinite(P)):
        raise RuntimeError("Riccati solve failed for the terminal mode")
    K = np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
    P = inflate * P

    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_samples, nx))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    evals, evecs = np.linalg.eigh(P)
    P_inv_sqrt = evecs @ np.diag(evals ** -0.5) @ evecs.T
    shell = dirs @ P_inv_sqrt.T  # x'Px = 1 surface
    radial = np.concatenate([np.ones(n_samples), rng.uniform(0.05, 1.0, size=n_samples)])
    pts_unit = np.concatenate([shell, shell])
    flow_cfg = FlowConfig(substeps=substeps)

    c = c_init
    for _ in range(max_halvings):
        pts = pts_unit * (np.sqrt(c) * radial)[:, None]
        u = terminal_control(TerminalIngredients(P, K, c), mode.input_lo, mode.input_hi, pts)
        nxts = flow_fixed(mode, pts, u, dt_d, flow_cfg)
        phi = np.einsum("bi,ij,bj->b", pts, P, pts)
        phi_next = np.einsum("bi,ij,bj->b", nxts, P, nxts)
        stage = np.einsum("bi,ij,bj->b", pts, Q, pts) + np.einsum("bi,ij,bj->b", u, R, u)
        decrease_ok = np.all(phi_next <= phi - stage + 1e-9 * (1.0 + np.abs(phi)))
        boundary = pts[:n_samples]
        # the level set must sit strictly on one side of every guard surface
        guard_ok = True
        for g in system.guards.values():
            vals = np.asarray(g.h(boundary)) - g.c
            if not (np.max(vals) < -1e-9 or np.min(vals) > 1e-9):
                guard_ok = False
                break
        if decrease_ok and guard_ok:
            return TerminalIngredients(P=P, K=K, c_f=float(c))
        c *= 0.5
    raise RuntimeError("no positive terminal level verified the one-step decrease")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MpcConfig:
    N: int
    dt_d: float
    dt: float
    Q: Array
    R: Array
    terminal: TerminalIngredients | None = None
    substeps: int = 10
    input_budget: float = 0.0
    solver: nlp.SolveOptions = nlp.SolveOptions()
    # post-impact replans re-anchor the whole schedule in one solve; give
    # them their own (typically larger) budget when set
    event_solver: nlp.SolveOptions | None = None

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        # dt may exceed dt_d: a solver slower than the node lattice still
        # recomputes every dt seconds and must tighten for that full period
        if not (self.dt_d > 0 and self.dt > 0):
            raise ValueError("need dt > 0 and dt_d > 0")
        for M in (self.Q, self.R):
            if np.min(np.linalg.eigvalsh(np.asarray(M))) < -1e-10:
                raise ValueError("Q and R must be positive semidefinite")
        if self.substeps < 1 or self.input_budget < 0:
            raise ValueError("substeps >= 1 and input_budget >= 0 required")

    @property
    def flow(self) -> FlowConfig:
        return FlowConfig(substeps=self.substeps)


@dataclass
class Plan:
    """A solved horizon: node states/inputs, achieved cost, and solve metadata.

    ``max_violation`` is recomputed at the stored trajectory; ``fallback``
    marks plans where the shifted previous solution beat the solver output
    (the suboptimal-MPC cost-decrease safeguard).
    """

    states: Array
    inputs: Array
    cost: float
    schedule: ModeSchedule
    solve: nlp.SolveResult
    max_violation: float
    fallback: bool = False
    feas_tol: float = 1e-6

    @property
    def feasible(self) -> bool:
        return self.max_violation <= self.feas_tol

    def pack(self) -> Array:
        return np.concatenate([self.states.ravel(), self.inputs.ravel()])


# ---------------------------------------------------------------------------
# transcription


def _crossing_interp(guard: Guard, a: Array, b: Array, iters: int = 40) -> Array:
    """State where the segment a -> b crosses the guard (linear in time).

    Bisection on the signed guard value; clamps to a when a is already past
    and to b when the segment never reaches the guard, so the map is defined
    at every solver iterate.
    """
    va = np.asarray(guard_value(guard, a))
    vb = np.asarray(guard_value(guard, b))
    lo = np.zeros_like(va)
    hi = np.ones_like(va)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        vm = np.asarray(guard_value(guard, a + mid[..., None] * (b - a)))
        below = vm < 0.0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    theta = np.where(va >= 0.0, 0.0, np.where(vb < 0.0, 1.0, hi))
    return a + theta[..., None] * (b - a)


@dataclass
class Transcription:
    """Problem plus the layout info needed to interpret decision vectors."""

    problem: nlp.NlpProblem
    schedule: ModeSchedule
    nx: int
    nu: int
    eq_labels: list[str] = field(default_factory=list)
    ineq_labels: list[str] = field(default_factory=list)
    infeasible_by_construction: bool = False

    def worst_rows(self, z: Array, top: int = 5) -> list[tuple[str, float]]:
        _, e, g = self.problem.eval_row(z)
        rows = [(lbl, abs(v)) for lbl, v in zip(self.eq_labels, e)]
        rows += [(lbl, max(v, 0.0)) for lbl, v in zip(self.ineq_labels, g)]
        return sorted(rows, key=lambda r: -r[1])[:top]

    def unpack(self, z: Array) -> tuple[Array, Array]:
        N = self.schedule.horizon
        ns = (N + 1) * self.nx
        return z[:ns].reshape(N + 1, self.nx), z[ns:].reshape(N, self.nu)

    def pack(self, states: Array, inputs: Array) -> Array:
        return np.concatenate([states.ravel(), inputs.ravel()])


def transcribe(
    system: HybridSystem,
    schedule: ModeSchedule,
    x0: Array,
    cfg: MpcConfig,
    tube: TubeModel | None = None,
) -> Transcription:
    """Build the (robust, if a tube is given) shooting NLP for one schedule."""
    schedule.validate_against(system)
    if cfg.terminal is None:
        raise ValueError("cfg.terminal must be set before transcription")
    N = schedule.horizon
    x0 = np.asarray(x0, dtype=float)
    nx = x0.size
    nu = system.mode(schedule.modes[0]).input_lo.size
    robust = tube is not None
    ti = cfg.terminal

    margins: dict[str, float] = {}
    if robust:
        diam = combined_diam(tube, cfg.dt)
        for gid, g in system.guards.items():
            if g.lip_h is None:
                raise ValueError(f"guard {gid} needs lip_h for robust tightening")
            margins[gid] = diam * g.lip_h

    segs = schedule.segments()
    # flow edges grouped by mode; reset edges with their guards; contact nodes
    flow_by_mode: dict[str, list[int]] = {}
    reset_edges: list[tuple[int, Guard]] = []
    contact_nodes: list[tuple[int, Guard]] = []
    virtual_nodes: list[tuple[int, Guard]] = []  # (node k_n, guard); k_n = 0 -> phantom
    avoid: list[tuple[int, Guard, float]] = []

    # entry nodes start exactly on the guard just traversed (resets keep the
    # contact point), so that one guard's avoid constraint is skipped there
    entered_on: dict[int, str] = {k + 1: gid for k, gid in schedule.guards.items()}
    for mode, start, end, gid in segs:
        g = system.guards[gid] if gid is not None else None
        # flow edges cover start..end-1; the k_n -> k_n+1 edge is the reset
        for k in range(start, end):
            flow_by_mode.setdefault(mode, []).append(k)
        if g is not None:
            reset_edges.append((end, g))
            if robust:
                # no contact pin: the crossing floats inside the edge from
                # node end-1 (approach side) to the virtual node (past), and
                # the reset maps the interpolated on-guard state
                virtual_nodes.append((end, g))
            else:
                if end >= 1:
                    contact_nodes.append((end, g))
        for k in range(max(start, 1), end + 1):
            for other in system.outgoing(mode):
                if g is not None and other.id == g.id:
                    if robust and k == end:
                        continue  # virtual node must pass its own guard
                    if not robust and k == end:
                        continue  # contact node sits exactly on it
                    if robust and k == end - 1:
                        # last approach node may ride the guard surface
                        # itself: only "not yet past", no tightening
                        avoid.append((k, other, 0.0))
                        continue
                if entered_on.get(k) == other.id:
                    continue
                avoid.append((k, other, margins.get(other.id, 0.0)))

    # input bounds per node, shrunk by the low-level budget in the robust case
    u_lo = np.zeros((N, nu))
    u_hi = np.zeros((N, nu))
    shrink = cfg.input_budget if robust else 0.0
    infeasible_box = False
    for k in range(N):
        m = system.mode(schedule.modes[k])
        u_lo[k] = m.input_lo + shrink
        u_hi[k] = m.input_hi - shrink
        if np.any(u_lo[k] > u_hi[k]):
            infeasible_box = True

    ns = (N + 1) * nx
    lower = np.concatenate([np.full(ns, -np.inf), u_lo.ravel()])
    upper = np.concatenate([np.full(ns, np.inf), u_hi.ravel()])
    lower[:nx] = x0
    upper[:nx] = x0

    state_cost_mask = np.array(
        [1.0 if k not in schedule.guards else 0.0 for k in range(N)]
    )
    flow_cfg = cfg.flow
    flow_ks = {m: np.array(ks, dtype=int) for m, ks in flow_by_mode.items() if ks}
    Q, R, P = np.asarray(cfg.Q), np.asarray(cfg.R), ti.P
    n_vars = ns + N * nu

    eq_labels: list[str] = []
    for mode_id, ks in flow_ks.items():
        eq_labels += [f"flow[{mode_id}] k={k} dim={i}" for k in ks for i in range(nx)]
    for k, g in reset_edges:
        eq_labels += [f"reset[{g.id}] k={k} dim={i}" for i in range(nx)]
    eq_labels += [f"contact[{g.id}] k={k}" for k, g in contact_nodes]
    ineq_labels = [f"avoid[{g.id}] k={k}" for k, g, _ in avoid]
    ineq_labels += [f"tube-past[{g.id}] k={k}" for k, g in virtual_nodes]
    ineq_labels.append("terminal-level")

    def fused(Z: Array) -> tuple[Array, Array, Array]:
        with np.errstate(over="ignore", invalid="ignore"):
            return _fused_inner(Z)

    def _fused_inner(Z: Array) -> tuple[Array, Array, Array]:
        B = Z.shape[0]
        X = Z[:, :ns].reshape(B, N + 1, nx)
        U = Z[:, ns:].reshape(B, N, nu)

        eq_parts = []
        for mode_id, ks in flow_ks.items():
            mode = system.mode(mode_id)
            nxt = flow_fixed(mode, X[:, ks], U[:, ks], cfg.dt_d, flow_cfg)
            eq_parts.append((X[:, ks + 1] - nxt).reshape(B, -1))
        phantom: dict[int, Array] = {}
        for k, g in reset_edges:
            if robust:
                if k == 0:
                    mode = system.mode(schedule.modes[0])
                    past = flow_fixed(mode, X[:, 0], U[:, 0], cfg.dt_d, flow_cfg)
                    phantom[0] = past
                    xg = _crossing_interp(g, X[:, 0], past)
                else:
                    xg = _crossing_interp(g, X[:, k - 1], X[:, k])
            else:
                xg = X[:, k]
            eq_parts.append(X[:, k + 1] - system.resets[g.id].map(xg))
        for k, g in contact_nodes:
            eq_parts.append(np.asarray(guard_value(g, X[:, k]))[:, None])

        ineq_parts = []
        for k, g, margin in avoid:
            ineq_parts.append(
                np.asarray(guard_value(g, X[:, k])) + margin + EPS_STRICT
            )
        for k, g in virtual_nodes:
            xv = phantom[0] if k == 0 else X[:, k]
            ineq_parts.append(margins[g.id] - np.asarray(guard_value(g, xv)))
        ineq_parts.append(np.einsum("bi,ij,bj->b", X[:, N], P, X[:, N]) - ti.c_f)

        costs = np.einsum("bki,ij,bkj->b", X[:, :N] * state_cost_mask[:, None], Q,
                          X[:, :N] * state_cost_mask[:, None])
        costs = costs + np.einsum("bki,ij,bkj->b", U, R, U)
        costs = costs + np.einsum("bi,ij,bj->b", X[:, N], P, X[:, N])

        eqs = np.concatenate(eq_parts, axis=1) if eq_parts else np.empty((B, 0))
        ineqs = np.stack(ineq_parts, axis=1) if ineq_parts else np.empty((B, 0))
        return costs, eqs, ineqs

    problem = nlp.NlpProblem(
        n_vars=n_vars,
        cost=lambda z: float(fused(z[None, :])[0][0]),
        eq_constraints=lambda z: fused(z[None, :])[1][0],
        ineq_constraints=lambda z: fused(z[None, :])[2][0],
        lower=lower,
        upper=upper,
        fused_batch=fused,
    )
    return Transcription(
        problem=problem, schedule=schedule, nx=nx, nu=nu,
        eq_labels=eq_labels, ineq_labels=ineq_labels,
        infeasible_by_construction=infeasible_box,
    )


def build_fixed_mode(system: HybridSystem, schedule: ModeSchedule, x0: Array,
                     cfg: MpcConfig) -> nlp.NlpProblem:
    return transcribe(system, schedule, x0, cfg).problem


def build_robust(system: HybridSystem, schedule: ModeSchedule, x0: Array,
                 cfg: MpcConfig, tube: TubeModel) -> nlp.NlpProblem:
    return transcribe(system, schedule, x0, cfg, tube=tube).problem


# ---------------------------------------------------------------------------
# warm starting and simulation through the transcription dynamics


def simulate_schedule(
    system: HybridSystem,
    schedule: ModeSchedule,
    x0: Array,
    inputs: Array,
    cfg: MpcConfig,
    robust: bool = False,
) -> Array:
    """Roll the transcription dynamics (flows and resets) under given inputs."""
    N = schedule.horizon
    x0 = np.asarray(x0, dtype=float)
    states = np.zeros((N + 1, x0.size))
    states[0] = x0
    for k in range(N):
        mode = system.mode(schedule.modes[k])
        gid = schedule.guards.get(k)
        if gid is None:
            states[k + 1] = flow_fixed(mode, states[k], inputs[k], cfg.dt_d, cfg.flow)
        else:
            g = system.guards[gid]
            if robust:
                if k == 0:
                    past = flow_fixed(mode, states[0], inputs[0], cfg.dt_d, cfg.flow)
                    xg = _crossing_interp(g, states[0][None], past[None])[0]
                else:
                    xg = _crossing_interp(g, states[k - 1][None], states[k][None])[0]
            else:
                xg = states[k]
            states[k + 1] = system.resets[gid].map(xg)
    return states


def warm_start(
    prev: Plan | None,
    schedule: ModeSchedule,
    x0_new: Array,
    system: HybridSystem,
    cfg: MpcConfig,
    robust: bool = False,
    dropped: int = 1,
    override: "dict[int, Array] | None" = None,
) -> Array:
    """Initial decision vector: shifted previous inputs, terminal law appended.

    Drops as many leading inputs as schedule nodes were removed, extends with
    the clamped terminal feedback evaluated along the re-simulated tail, and
    re-simulates all node states from the new initial state so the dynamics
    equalities start satisfied. ``override`` pins chosen edges to explicit
    inputs (still clipped to the planning box) before re-simulation.
    """
    N = schedule.horizon
    x0_new = np.asarray(x0_new, dtype=float)
    nu = system.mode(schedule.modes[0]).input_lo.size
    # absent a previous plan, fall back to a zero-input rollout
    ti = cfg.terminal if prev is not None else None
    carried = prev.inputs[dropped:] if prev is not None else np.zeros((0, nu))

    states = np.zeros((N + 1, x0_new.size))
    states[0] = x0_new
    inputs = np.zeros((N, nu))
    shrink = cfg.input_budget if robust else 0.0
    for k in range(N):
        mode = system.mode(schedule.modes[k])
        lo, hi = mode.input_lo + shrink, mode.input_hi - shrink
        if override is not None and k in override:
            inputs[k] = np.clip(override[k], lo, hi)
        elif k < len(carried):
            inputs[k] = np.clip(carried[k], lo, hi)
        elif ti is not None:
            inputs[k] = terminal_control(ti, lo, hi, states[k])
        gid = schedule.guards.get(k)
        if gid is None:
            states[k + 1] = flow_fixed(mode, states[k], inputs[k], cfg.dt_d, cfg.flow)
        else:
            g = system.guards[gid]
            if robust:
                if k == 0:
                    past = flow_fixed(mode, states[0], inputs[0], cfg.dt_d, cfg.flow)
                    xg = _crossing_interp(g, states[0][None], past[None])[0]
                else:
                    xg = _crossing_interp(g, states[k - 1][None], states[k][None])[0]
            else:
                xg = states[k]
            states[k + 1] = system.resets[gid].map(xg)
    return np.concatenate([states.ravel(), inputs.ravel()])


def _approach_corner(mode, guard: Guard, x: Array, lo: Array, hi: Array,
                     carried: Array) -> Array:
    """Input-box corner that maximizes the approach rate toward a guard.

    The guard value grows toward the crossing and inputs act on the
    acceleration, so each channel is pushed to whichever bound raises
    the guard value's second time derivative most; channels with no
    effect keep the carried input.
    """
    n2 = x.size // 2
    delta = 1e-4
    gp = np.zeros(n2)
    for i in range(n2):
        e = np.zeros(x.size)
        e[i] = delta
        gp[i] = float(guard_value(guard, x + e) - guard_value(guard, x - e)) \
            / (2 * delta)

    def rate(u: Array) -> float:
        return float(gp @ np.asarray(mode.vector_field(x, u))[n2:])

    base = rate(np.zeros_like(lo))
    out = carried.astype(float).copy()
    for j in range(lo.size):
        probe_hi = np.zeros_like(lo)
        probe_hi[j] = hi[j]
        probe_lo = np.zeros_like(lo)
        probe_lo[j] = lo[j]
        v_hi, v_lo = rate(probe_hi), rate(probe_lo)
        if v_hi > base + 1e-9 and v_hi >= v_lo:
            out[j] = hi[j]
        elif v_lo > base + 1e-9:
            out[j] = lo[j]
    return out


# ---------------------------------------------------------------------------
# solve


def _bump_node(label: str, offset: int) -> str:
    """Shift the ``k=<n>`` field of a constraint label by ``offset``."""
    head, sep, rest = label.partition(" k=")
    if not sep:
        return label
    num, sep2, tail = rest.partition(" ")
    return f"{head} k={int(num) + offset}" + (f" {tail}" if sep2 else "")


def _remap_duals(
    prev_tr: Transcription, new_tr: Transcription,
    lam: Array, mu: Array, dropped: int,
) -> tuple[Array | None, Array | None]:
    """Carry multipliers across a schedule shift by matching row labels.

    New-problem node k corresponds to previous node k + dropped; rows with no
    predecessor (the appended tail, structure changes after a replan) start
    at zero, which safely degrades to a cold multiplier estimate.
    """
    if lam.size != len(prev_tr.eq_labels) or mu.size != len(prev_tr.ineq_labels):
        return None, None
    by_eq = dict(zip(prev_tr.eq_labels, lam))
    by_in = dict(zip(prev_tr.ineq_labels, mu))
    lam0 = np.array([by_eq.get(_bump_node(l, dropped), 0.0) for l in new_tr.eq_labels])
    mu0 = np.array([by_in.get(_bump_node(l, dropped), 0.0) for l in new_tr.ineq_labels])
    return lam0, mu0


def _biased_warm_start(
    prev: Plan | None,
    schedule: ModeSchedule,
    x0: Array,
    system: HybridSystem,
    cfg: MpcConfig,
    robust: bool,
    dropped: int,
) -> Array | None:
    """Warm-start variant driving hard at the first upcoming guard.

    Every flow edge before the first reset edge takes the input corner
    that maximizes the guard-approach rate; ``None`` when there is no
    guard ahead or no input channel helps.
    """
    if not schedule.guards:
        return None
    k1 = schedule.guard_nodes[0]
    g = system.guards[schedule.guards[k1]]
    mode0 = system.mode(schedule.modes[0])
    shrink = cfg.input_budget if robust else 0.0
    lo, hi = mode0.input_lo + shrink, mode0.input_hi - shrink
    nu = lo.size
    corner = _approach_corner(mode0, g, np.asarray(x0, dtype=float),
                              lo, hi, np.zeros(nu))
    if not np.any(np.abs(corner) > 1e-9):
        return None
    # a quarter of the available authority: enough to land in the
    # "arrives hot" basin, where backing the input off is the easy
    # descent direction, without flying past the whole guard region
    carried = prev.inputs[dropped:] if prev is not None else \
        np.zeros((0, nu))
    override: dict[int, Array] = {}
    for k in range(k1):
        base = carried[k] if k < len(carried) else np.zeros(nu)
        u = base.astype(float).copy()
        helps = np.abs(corner) > 1e-9
        u[helps] = 0.75 * base[helps] + 0.25 * corner[helps]
        override[k] = u
    return warm_start(prev, schedule, x0, system, cfg, robust=robust,
                      dropped=dropped, override=override)


def solve_mpc(
    system: HybridSystem,
    schedule: ModeSchedule,
    x0: Array,
    cfg: MpcConfig,
    tube: TubeModel | None = None,
    prev: Plan | None = None,
    dropped: int = 1,
) -> Plan:
    """Solve one horizon and return the better of solver output and warm start.

    The shifted previous solution is itself a feasible candidate along the
    nominal closed loop; returning whichever of (solved, candidate) is
    feasible with lower cost preserves the per-step cost decrease even when
    the solver terminates early or at a worse local point.
    """
    tr = transcribe(system, schedule, x0, cfg, tube=tube)
    robust = tube is not None
    z0 = warm_start(prev, schedule, x0, system, cfg, robust=robust, dropped=dropped)

    if tr.infeasible_by_construction:
        states, inputs = tr.unpack(z0)
        res = nlp.SolveResult(
            status=nlp.STATUS_INFEASIBLE, primal=z0, cost=float("inf"),
            max_eq_violation=float("inf"), max_ineq_violation=float("inf"),
            iterations=0,
        )
        return Plan(states=states, inputs=inputs, cost=float("inf"),
                    schedule=schedule, solve=res, max_violation=float("inf"),
                    feas_tol=cfg.solver.tol_feas)

    lam0 = mu0 = None
    if prev is not None and prev.solve.lam.size:
        # multipliers transfer across the shift, matched row-by-row via the
        # constraint labels; the penalty restarts at rho_init so a stalled
        # previous solve does not leave the next one ill-conditioned
        prev_tr = transcribe(system, prev.schedule, prev.states[0], cfg, tube=tube)
        lam0, mu0 = _remap_duals(prev_tr, tr, prev.solve.lam, prev.solve.mu, dropped)

    res = nlp.solve(tr.problem, z0, cfg.solver, lam0=lam0, mu0=mu0)

    def viol_of(z: Array) -> tuple[float, float]:
        c, e, g = tr.problem.eval_row(z)
        v = 0.0
        if e.size:
            v = max(v, float(np.max(np.abs(e))))
        if g.size:
            v = max(v, float(np.max(np.maximum(g, 0.0))))
        return float(c), v

    tol = cfg.solver.tol_feas
    cost_w, viol_w = viol_of(z0)
    solver_viol = max(res.max_eq_violation, res.max_ineq_violation)

    if viol_w > tol and solver_viol > tol:
        # both attempts infeasible: retry once from a guard-approach-biased
        # start. One-sided inputs make "too hot" recoverable (back off the
        # input) where "too cold" is not, so the biased basin is the one a
        # drifted state can actually converge in.
        z1 = _biased_warm_start(prev, schedule, x0, system, cfg, robust, dropped)
        if z1 is not None:
            res2 = nlp.solve(tr.problem, z1, cfg.solver)
            viol2 = max(res2.max_eq_violation, res2.max_ineq_violation)
            if viol2 <= tol or viol2 < solver_viol:
                res, solver_viol = res2, viol2

    # keep whichever candidate is feasible (ties broken by cost); if neither
    # is, keep the less infeasible one so a bad solve cannot displace a
    # near-feasible warm start
    if viol_w <= tol and solver_viol <= tol:
        use_warm = cost_w < res.cost
    elif viol_w <= tol or solver_viol <= tol:
        use_warm = viol_w <= tol
    else:
        use_warm = viol_w < solver_viol

    z = z0 if use_warm else res.primal
    cost, viol = (cost_w, viol_w) if use_warm else (res.cost, solver_viol)
    states, inputs = tr.unpack(z)
    return Plan(states=states, inputs=inputs, cost=cost, schedule=schedule,
                solve=res, max_violation=viol, fallback=use_warm,
                feas_tol=cfg.solver.tol_feas)
