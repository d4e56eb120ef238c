"""Hybrid dynamical systems: modes, guards, resets, and guarded integration.

A hybrid system is a directed graph of modes. Each mode carries continuous
dynamics ``xdot = f(x, u)`` and a compact input box; each graph edge carries a
guard (a level set ``h(x) = c`` with a crossing direction) and exactly one
reset map applied when the flow reaches the guard.

Integration is fixed-step RK4. ``flow_fixed`` ignores guards;
``flow_with_events`` monitors every outgoing guard of the current mode at each
substep and refines the earliest crossing by bisection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray


class FlowDivergenceError(RuntimeError):
    """Raised when integration produces a non-finite state."""


class AmbiguousTransitionError(RuntimeError):
    """Raised when two guards are hit at indistinguishable times."""


class GuardContractError(ValueError):
    """Raised when an operation requires a state on a guard and gets none."""


@dataclass(frozen=True)
class Guard:
    """Level-set guard ``h(x) = c`` on an edge of the mode graph.

    ``crossing_sign`` gives the direction of violation: +1 means the guard
    fires when h rises to c, -1 when it falls to c. ``lip_h`` optionally
    records a known Lipschitz constant of h (used for tube margins).
    """

    id: str
    source_mode: str
    target_mode: str
    h: Callable[[Array], Array]
    c: float
    crossing_sign: int
    lip_h: float | None = None


@dataclass(frozen=True)
class ResetMap:
    """State remap applied exactly on a guard; consumes no time."""

    guard_id: str
    map: Callable[[Array], Array]


@dataclass(frozen=True)
class Mode:
    """One node of the hybrid graph: dynamics plus an input box.

    ``vector_field(x, u)`` must broadcast over leading batch dimensions:
    x has shape (..., n), u has shape (..., m), result (..., n).
    """

    id: str
    vector_field: Callable[[Array, Array], Array]
    input_lo: Array
    input_hi: Array
    domain_check: Callable[[Array], bool] | None = None

    def clamp_input(self, u: Array) -> Array:
        return np.clip(u, self.input_lo, self.input_hi)


@dataclass(frozen=True)
class HybridSystem:
    """Modes, guards and resets, with the equilibrium in ``final_mode``."""

    modes: dict[str, Mode]
    guards: dict[str, Guard]
    resets: dict[str, ResetMap]
    final_mode: str

    def __post_init__(self):
        for g in self.guards.values():
            if g.source_mode not in self.modes or g.target_mode not in self.modes:
                raise ValueError(f"guard {g.id} references unknown mode")
            if g.id not in self.resets:
                raise ValueError(f"guard {g.id} has no reset map")
        if self.final_mode not in self.modes:
            raise ValueError(f"unknown final mode {self.final_mode}")

    def outgoing(self, mode_id: str) -> list[Guard]:
        """Guards whose source is ``mode_id``, in insertion order."""
        return [g for g in self.guards.values() if g.source_mode == mode_id]

    def guard(self, guard_id: str) -> Guard:
        return self.guards[guard_id]

    def mode(self, mode_id: str) -> Mode:
        return self.modes[mode_id]


@dataclass(frozen=True)
class FlowConfig:
    """Fixed-step integrator settings."""

    substeps: int = 10
    event_tol: float = 1e-9
    max_bisect: int = 40
    tie_tol: float = 1e-12


DEFAULT_FLOW = FlowConfig()


@dataclass(frozen=True)
class FlowResult:
    """Outcome of a guarded integration.

    ``samples`` holds the dense substep grid (times, states) actually
    traversed, ending at the event state when an event occurred.
    """

    end_state: Array
    elapsed: float
    event: tuple[str, Array, float] | None
    samples: tuple[Array, Array]


def guard_value(guard: Guard, x: Array) -> Array:
    """Signed guard coordinate: positive once the state is past the guard.

    Returns ``crossing_sign * (h(x) - c)``; zero exactly on the guard.
    Broadcasts over leading dimensions of x.
    """
    return guard.crossing_sign * (np.asarray(guard.h(x)) - guard.c)


def _rhs(mode: Mode, t: float, x: Array, u, w: Array | None) -> Array:
    uval = u(t, x) if callable(u) else u
    dx = mode.vector_field(x, uval)
    if w is not None:
        dx = dx + w
    return dx


def _rk4_step(mode: Mode, t: float, x: Array, u, h: float, w: Array | None) -> Array:
    k1 = _rhs(mode, t, x, u, w)
    k2 = _rhs(mode, t + 0.5 * h, x + 0.5 * h * k1, u, w)
    k3 = _rhs(mode, t + 0.5 * h, x + 0.5 * h * k2, u, w)
    k4 = _rhs(mode, t + h, x + h * k3, u, w)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def flow_fixed(
    mode: Mode,
    x0: Array,
    u,
    dt: float,
    cfg: FlowConfig = DEFAULT_FLOW,
    w: Array | None = None,
    t0: float = 0.0,
) -> Array:
    """Integrate ``xdot = f(x, u) (+ w)`` over [0, dt] ignoring guards.

    Fixed-step RK4 with ``cfg.substeps`` steps; deterministic. ``u`` is either
    a constant input array (broadcastable against x0) or a callable
    ``u(t, x)``. Batched states (leading dimensions on x0/u) are supported for
    array inputs.

    Raises FlowDivergenceError for non-finite results on unbatched input; in
    batched mode non-finite rows propagate so callers can score them.
    """
    x0 = np.asarray(x0, dtype=float)
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if dt == 0.0:
        return x0.copy()
    h = dt / cfg.substeps
    x = x0
    t = t0
    for _ in range(cfg.substeps):
        x = _rk4_step(mode, t, x, u, h, w)
        t += h
    if x.ndim == 1 and not np.all(np.isfinite(x)):
        raise FlowDivergenceError(f"flow diverged in mode {mode.id}")
    return x


def flow_with_events(
    system: HybridSystem,
    mode_id: str,
    x0: Array,
    u,
    dt: float,
    cfg: FlowConfig = DEFAULT_FLOW,
    w: Array | None = None,
    t0: float = 0.0,
) -> FlowResult:
    """Integrate like ``flow_fixed`` but stop at the first guard crossing.

    Every outgoing guard of the mode is monitored at substep resolution. A
    guard can fire only after it has been armed, i.e. its signed value has
    been strictly below zero at some sample; a trajectory that starts on a
    guard moving away from it therefore does not retrigger. Crossings are
    refined by bisection until ``|h - c| <= cfg.event_tol``.

    Raises AmbiguousTransitionError when two guards cross within
    ``cfg.tie_tol`` of each other.
    """
    mode = system.mode(mode_id)
    guards = system.outgoing(mode_id)
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1:
        raise ValueError("flow_with_events is defined for single states only")
    if dt <= 0:
        raise ValueError("dt must be > 0")

    h = dt / cfg.substeps
    vals = np.array([guard_value(g, x0) for g in guards], dtype=float)
    armed = vals < -cfg.event_tol

    times = [t0]
    states = [x0.copy()]
    x = x0
    t = t0
    for _ in range(cfg.substeps):
        x_next = _rk4_step(mode, t, x, u, h, w)
        if not np.all(np.isfinite(x_next)):
            raise FlowDivergenceError(f"flow diverged in mode {mode_id}")
        new_vals = np.array([guard_value(g, x_next) for g in guards], dtype=float)

        hits: list[tuple[float, Array, Guard]] = []
        for i, g in enumerate(guards):
            if armed[i] and vals[i] < 0.0 <= new_vals[i]:
                s_hit, x_hit = _bisect_crossing(mode, g, t, x, u, h, w, cfg)
                hits.append((t + s_hit, x_hit, g))
        if hits:
            hits.sort(key=lambda hit: hit[0])
            if len(hits) > 1 and hits[1][0] - hits[0][0] <= cfg.tie_tol:
                raise AmbiguousTransitionError(
                    f"guards {hits[0][2].id} and {hits[1][2].id} hit simultaneously"
                )
            t_hit, x_hit, g = hits[0]
            times.append(t_hit)
            states.append(x_hit)
            return FlowResult(
                end_state=x_hit,
                elapsed=t_hit - t0,
                event=(g.id, x_hit, t_hit),
                samples=(np.array(times), np.array(states)),
            )

        armed = armed | (new_vals < -cfg.event_tol)
        vals = new_vals
        x = x_next
        t += h
        times.append(t)
        states.append(x.copy())

    return FlowResult(
        end_state=x,
        elapsed=dt,
        event=None,
        samples=(np.array(times), np.array(states)),
    )


def _bisect_crossing(
    mode: Mode,
    guard: Guard,
    t_lo: float,
    x_lo: Array,
    u,
    h: float,
    w: Array | None,
    cfg: FlowConfig,
) -> tuple[float, Array]:
    """Refine a crossing inside one substep; returns (offset, state)."""
    lo, hi = 0.0, h
    x_hi = _rk4_step(mode, t_lo, x_lo, u, h, w)
    x_mid = x_hi
    for _ in range(cfg.max_bisect):
        mid = 0.5 * (lo + hi)
        x_mid = _rk4_step(mode, t_lo, x_lo, u, mid, w) if mid > 0 else x_lo
        v = float(guard_value(guard, x_mid))
        if abs(v) <= cfg.event_tol:
            return mid, x_mid
        if v < 0.0:
            lo = mid
        else:
            hi = mid
            x_hi = x_mid
    return hi, x_hi


def apply_reset(system: HybridSystem, guard_id: str, x: Array, tol: float | None = None) -> Array:
    """Apply the guard's reset map to an on-guard state.

    Raises GuardContractError if ``|h(x) - c|`` exceeds ``tol`` (defaults to
    the integrator event tolerance).
    """
    guard = system.guard(guard_id)
    tol = DEFAULT_FLOW.event_tol if tol is None else tol
    v = float(guard_value(guard, np.asarray(x, dtype=float)))
    if abs(v) > tol:
        raise GuardContractError(
            f"state is not on guard {guard_id}: |h - c| = {abs(v):.3e} > {tol:.3e}"
        )
    return np.asarray(system.resets[guard_id].map(np.asarray(x, dtype=float)), dtype=float)
