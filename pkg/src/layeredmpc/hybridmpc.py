"""Mode-sequence search: the high-level layer above the fixed-mode MPC.

A candidate is an ordered list of guard traversals plus a dwell (node count)
per visited domain. Candidates are scored by solving the fixed-mode MPC for
their schedule; infeasible candidates score a large penalty plus their
constraint violation so the search still ranks them. Two strategies: plain
enumeration of small-depth graph paths, and a cross-entropy search over a
categorical sequence distribution and per-domain dwell distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nlp
from .hybridsys import HybridSystem
from .mpc import ModeSchedule, MpcConfig, Plan, solve_mpc
from .tubes import TubeModel

Array = np.ndarray

INFEASIBLE_PENALTY = 1e9


class NoFeasibleSequenceError(RuntimeError):
    """No candidate sequence produced a feasible fixed-mode plan."""


@dataclass(frozen=True)
class SequenceCandidate:
    """Guard ids to traverse, starting mode, and nodes allotted per domain.

    ``dwell[i]`` counts the nodes of domain i among nodes 1..N (node 0 is the
    pinned initial state and belongs to domain 0 for free), so the dwells sum
    to the horizon N. Domain i's last node is ``sum(dwell[:i+1])``.
    """

    start_mode: str
    edges: tuple[str, ...]
    dwell: tuple[int, ...]

    def __post_init__(self):
        if len(self.dwell) != len(self.edges) + 1:
            raise ValueError("need one dwell per visited domain")
        if any(d < 1 for d in self.dwell):
            raise ValueError("dwells must be >= 1")

    @property
    def horizon(self) -> int:
        return sum(self.dwell)

    def to_schedule(self, system: HybridSystem) -> ModeSchedule:
        modes = [self.start_mode] * (self.dwell[0] + 1)
        guards: dict[int, str] = {}
        mode = self.start_mode
        node = self.dwell[0]
        for gid, d in zip(self.edges, self.dwell[1:]):
            g = system.guards[gid]
            if g.source_mode != mode:
                raise ValueError(f"guard {gid} does not leave mode {mode}")
            guards[node] = gid
            mode = g.target_mode
            modes += [mode] * d
            node += d
        if mode != system.final_mode:
            raise ValueError("sequence does not end in the final mode")
        return ModeSchedule(modes=tuple(modes), guards=guards)


def mode_of(system: HybridSystem, x: Array) -> str:
    """Mode whose domain contains x; the final mode wins on overlaps."""
    hits = [mid for mid, m in system.modes.items()
            if m.domain_check is not None and m.domain_check(np.asarray(x))]
    if system.final_mode in hits:
        return system.final_mode
    if hits:
        return hits[0]
    raise ValueError("state lies in no mode's domain")


def _graph_paths(system: HybridSystem, start: str, max_transitions: int
                 ) -> list[tuple[str, ...]]:
    """All guard-id paths from start to the final mode, shortest first."""
    paths: list[tuple[str, ...]] = []

    def walk(mode: str, prefix: tuple[str, ...]):
        if mode == system.final_mode:
            paths.append(prefix)
        if len(prefix) == max_transitions:
            return
        for g in system.outgoing(mode):
            walk(g.target_mode, prefix + (g.id,))

    walk(start, ())
    paths.sort(key=len)
    return paths


def _dwell_allocations(n_edges: int, N: int, min_dwell: int,
                       shifts: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Uniform split plus shift variants plus the earliest-contact split.

    The earliest-contact split (every guarded domain at min_dwell, remainder
    in the final domain) matters for plants whose drift fixes the time to a
    guard: uniform dwells can all be too late.
    """
    n_dom = n_edges + 1
    base = max(min_dwell, N // n_dom)
    dwell = [base] * (n_dom - 1) + [N - base * (n_dom - 1)]
    if dwell[-1] < 1:
        dwell = [min_dwell] * (n_dom - 1) + [N - min_dwell * (n_dom - 1)]
    allocs = []

    def push(d):
        if all(v >= min_dwell for v in d[:-1]) and d[-1] >= 1 and sum(d) == N:
            t = tuple(d)
            if t not in allocs:
                allocs.append(t)

    push(dwell)
    for i in range(n_dom - 1):
        for s in shifts:
            var = list(dwell)
            var[i] += s
            var[-1] -= s
            push(var)
    push([min_dwell] * (n_dom - 1) + [N - min_dwell * (n_dom - 1)])
    return allocs


def enumerate_candidates(
    system: HybridSystem,
    x0: Array,
    max_transitions: int,
    N: int,
    min_dwell: int = 1,
    dwell_shifts: tuple[int, ...] = (-2, -1, 1, 2),
) -> list[SequenceCandidate]:
    """Graph paths to the final mode with uniform-plus-variant dwell splits."""
    if max_transitions > N // 2:
        raise ValueError("at most N/2 transitions fit in the horizon")
    start = mode_of(system, x0)
    out = []
    for path in _graph_paths(system, start, max_transitions):
        for dwell in _dwell_allocations(len(path), N, min_dwell, dwell_shifts):
            out.append(SequenceCandidate(start_mode=start, edges=path,
                                         dwell=dwell))
    return out


# ---------------------------------------------------------------------------
# scoring


def _score(system, schedule, x0, cfg, tube) -> tuple[float, Plan]:
    plan = solve_mpc(system, schedule, x0, cfg, tube=tube)
    if plan.feasible:
        return plan.cost, plan
    return INFEASIBLE_PENALTY + plan.max_violation, plan


def plan_enumerate(
    system: HybridSystem,
    x0: Array,
    cfg: MpcConfig,
    tube: TubeModel | None = None,
    max_transitions: int = 2,
    dwell_shifts: tuple[int, ...] = (-2, -1, 1, 2),
    screen: nlp.SolveOptions | None = None,
    screen_top: int = 3,
) -> tuple[ModeSchedule, Plan]:
    """Solve every candidate (optionally screening with a cheap budget first).

    With ``screen`` set, all candidates are ranked by a reduced-budget solve
    and only the ``screen_top`` best-ranked get the full-budget solve, taken
    in order until one is feasible. The cap keeps the worst case bounded:
    a state whose best-screened candidates all fail the full solve counts as
    a planning failure rather than a license to solve everything.
    """
    min_dwell = 2 if tube is not None else 1
    cands = enumerate_candidates(system, x0, max_transitions, cfg.N,
                                 min_dwell=min_dwell, dwell_shifts=dwell_shifts)
    if not cands:
        raise NoFeasibleSequenceError("no graph path reaches the final mode")

    if screen is None:
        best: tuple[float, ModeSchedule, Plan] | None = None
        for cand in cands:
            schedule = cand.to_schedule(system)
            score, plan = _score(system, schedule, x0, cfg, tube)
            if best is None or score < best[0]:
                best = (score, schedule, plan)
        if best is None or best[0] >= INFEASIBLE_PENALTY:
            raise NoFeasibleSequenceError("every candidate was infeasible")
        return best[1], best[2]

    cheap = replace(cfg, solver=screen)
    ranked = []
    for cand in cands:
        schedule = cand.to_schedule(system)
        score, _ = _score(system, schedule, x0, cheap, tube)
        ranked.append((score, schedule))
    ranked.sort(key=lambda r: r[0])
    for _, schedule in ranked[:max(1, screen_top)]:
        score, plan = _score(system, schedule, x0, cfg, tube)
        if score < INFEASIBLE_PENALTY:
            return schedule, plan
    raise NoFeasibleSequenceError("every screened candidate was infeasible")


# ---------------------------------------------------------------------------
# cross-entropy search


@dataclass(frozen=True)
class CemConfig:
    population: int = 8
    elite_frac: float = 0.5
    iterations: int = 3
    seed: int = 0
    infeasible_penalty: float = INFEASIBLE_PENALTY

    def __post_init__(self):
        if not (0 < self.elite_frac <= 1):
            raise ValueError("elite_frac in (0, 1]")
        if int(self.population * self.elite_frac) < 1:
            raise ValueError("need at least one elite")


def cem_search(
    system: HybridSystem,
    x0: Array,
    cfg: MpcConfig,
    cem: CemConfig,
    tube: TubeModel | None = None,
    max_transitions: int = 2,
    history: list | None = None,
) -> tuple[ModeSchedule, Plan]:
    """Cross-entropy over (sequence, dwell-split) candidates.

    Keeps a categorical distribution over graph paths and, per path, an
    independent categorical over each guarded domain's dwell; each iteration
    samples a population, scores it through the fixed-mode MPC, and refits
    both distributions to the elite fraction (add-half smoothing keeps every
    option alive). Returns the best pair ever seen; deterministic given the
    seed. ``history``, if given, collects the best-so-far score per iteration.
    """
    min_dwell = 2 if tube is not None else 1
    start = mode_of(system, x0)
    paths = _graph_paths(system, start, max_transitions)
    if not paths:
        raise NoFeasibleSequenceError("no graph path reaches the final mode")
    N = cfg.N
    rng = np.random.default_rng(cem.seed)

    # per path, per guarded domain: categorical over dwell values
    dwell_support = np.arange(min_dwell, N)
    if dwell_support.size == 0:
        paths = [p for p in paths if not p]
        if not paths:
            raise NoFeasibleSequenceError(
                "horizon too short for any guarded dwell")

    p_seq = np.full(len(paths), 1.0 / len(paths))
    dwell_probs: list[list[Array]] = []
    for path in paths:
        per_dom = [np.full(dwell_support.size, 1.0 / dwell_support.size)
                   for _ in range(len(path))]
        dwell_probs.append(per_dom)

    cache: dict[tuple, tuple[float, Plan | None]] = {}
    best_score = np.inf
    best: tuple[ModeSchedule, Plan] | None = None
    n_elite = max(1, int(cem.population * cem.elite_frac))

    for _ in range(cem.iterations):
        samples = []
        for _ in range(cem.population):
            si = int(rng.choice(len(paths), p=p_seq))
            dwells = tuple(
                int(rng.choice(dwell_support, p=pr)) for pr in dwell_probs[si])
            samples.append((si, dwells))

        scored = []
        for si, dwells in samples:
            key = (si, dwells)
            if key not in cache:
                final_dwell = N - sum(dwells)
                if final_dwell < 1:
                    cache[key] = (cem.infeasible_penalty + (1 - final_dwell),
                                  None)
                else:
                    cand = SequenceCandidate(start_mode=start,
                                             edges=paths[si],
                                             dwell=dwells + (final_dwell,))
                    schedule = cand.to_schedule(system)
                    score, plan = _score(system, schedule, x0, cfg, tube)
                    cache[key] = (score, plan)
            score, plan = cache[key]
            scored.append((score, si, dwells, plan))
            if score < best_score and plan is not None:
                best_score = score
                best = (plan.schedule, plan)

        if history is not None:
            history.append(best_score)

        scored.sort(key=lambda s: s[0])
        elites = scored[:n_elite]
        counts = np.full(len(paths), 0.5)
        for _, si, _, _ in elites:
            counts[si] += 1.0
        p_seq = counts / counts.sum()
        for si in set(si for _, si, _, _ in elites):
            for dom in range(len(paths[si])):
                dcounts = np.full(dwell_support.size, 0.5)
                for _, sj, dwells, _ in elites:
                    if sj == si:
                        dcounts[np.searchsorted(dwell_support,
                                                dwells[dom])] += 1.0
                dwell_probs[si][dom] = dcounts / dcounts.sum()

    if best is None or best_score >= cem.infeasible_penalty:
        raise NoFeasibleSequenceError("every sampled candidate was infeasible")
    return best


def hybrid_plan(
    system: HybridSystem,
    x0: Array,
    cfg: MpcConfig,
    strategy: str = "cem",
    tube: TubeModel | None = None,
    cem: CemConfig | None = None,
    max_transitions: int = 2,
    screen: nlp.SolveOptions | None = None,
) -> tuple[ModeSchedule, Plan]:
    if strategy == "enumerate":
        return plan_enumerate(system, x0, cfg, tube=tube,
                              max_transitions=max_transitions, screen=screen)
    if strategy == "cem":
        return cem_search(system, x0, cfg, cem or CemConfig(), tube=tube,
                          max_transitions=max_transitions)
    raise ValueError(f"unknown strategy {strategy!r}")
