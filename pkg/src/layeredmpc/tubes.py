"""Tracking-error tube diameters, region-of-attraction exit time, Lipschitz estimates.

Two bounds on how far a disturbed trajectory can drift from its nominal plan:
a worst-case exponential (trivial) envelope that always applies, and a tighter
saturating envelope valid while an exponentially input-to-state stable
tracking error remains inside its region of attraction. ``combined_diam``
switches from the tight bound to the worst case at the exit time tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hybridsys import Mode

Array = np.ndarray


@dataclass(frozen=True)
class TubeParams:
    """Constants of the worst-case envelope.

    L_x / L_u are Lipschitz constants of the vector field in state and input;
    eta bounds the disturbance norm and zeta the input tracking error.
    """

    L_x: float
    L_u: float
    eta: float
    zeta: float = 0.0

    def __post_init__(self):
        for name in ("L_x", "L_u", "eta", "zeta"):
            v = getattr(self, name)
            if not (v >= 0.0):
                raise ValueError(f"{name} must be >= 0, got {v}")
        if not math.isfinite(self.eta):
            raise ValueError("eta must be finite (bounded disturbance)")


@dataclass(frozen=True)
class EissParams:
    """Constants of the exponentially stable tracking-error bound.

    k1/k2 sandwich the Lyapunov function between powers of the error norm, k3
    gives its decay rate, sigma_eta is the disturbance gain evaluated at the
    disturbance bound, and roa_radius is the radius of the ball inside the
    error system's region of attraction.
    """

    k1: float
    k2: float
    k3: float
    sigma_eta: float
    roa_radius: float

    def __post_init__(self):
        for name in ("k1", "k2", "k3"):
            if not (getattr(self, name) > 0.0):
                raise ValueError(f"{name} must be > 0")
        if not (self.sigma_eta >= 0.0):
            raise ValueError("sigma_eta must be >= 0")
        if not (self.roa_radius >= 0.0):
            raise ValueError("roa_radius must be >= 0")

    @property
    def gamma(self) -> float:
        return self.k3 / self.k2

    @property
    def saturation(self) -> float:
        """Large-t limit of the tight envelope: sigma(eta) / (gamma k1)."""
        return self.sigma_eta / (self.gamma * self.k1)


def trivial_diam(p: TubeParams, t):
    """Worst-case envelope (eta + L_u zeta) t exp(L_x t); vectorized in t."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0):
        raise ValueError("t must be >= 0")
    out = (p.eta + p.L_u * p.zeta) * t * np.exp(p.L_x * t)
    return float(out) if out.ndim == 0 else out


def eiss_diam(e: EissParams, t):
    """Saturating envelope sigma(eta)/(gamma k1) (1 - exp(-gamma t))."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0):
        raise ValueError("t must be >= 0")
    out = e.saturation * (-np.expm1(-e.gamma * t))
    return float(out) if out.ndim == 0 else out


def exit_time(e: EissParams) -> float:
    """First time the tight envelope reaches the region-of-attraction radius.

    Infinite when the envelope saturates below the radius, i.e. the error
    never leaves the region of attraction.
    """
    if e.roa_radius >= e.saturation:
        return math.inf
    return -math.log(1.0 - e.roa_radius * e.gamma * e.k1 / e.sigma_eta) / e.gamma


@dataclass(frozen=True)
class TubeModel:
    """Combined envelope: tight bound until its exit time, worst case after.

    Construction enforces the hypothesis sigma(eta)/k1 <= eta under which the
    tight bound really is tighter; violating parameters are rejected.
    """

    trivial: TubeParams
    eiss: EissParams | None = None
    tau: float = field(init=False)

    def __post_init__(self):
        if self.eiss is not None:
            if self.eiss.sigma_eta / self.eiss.k1 > self.trivial.eta * (1.0 + 1e-12):
                raise ValueError(
                    "sigma_eta/k1 exceeds eta: tight envelope hypothesis violated"
                )
            tau = exit_time(self.eiss)
        else:
            tau = 0.0
        object.__setattr__(self, "tau", tau)


def combined_diam(m: TubeModel, t):
    """Tube diameter at elapsed time t (scalar or array)."""
    if m.eiss is None:
        return trivial_diam(m.trivial, t)
    t_arr = np.asarray(t, dtype=float)
    out = np.where(
        t_arr <= m.tau,
        eiss_diam(m.eiss, t_arr),
        trivial_diam(m.trivial, t_arr),
    )
    return float(out) if out.ndim == 0 else out


def estimate_lipschitz(
    mode: Mode,
    state_lo: Array,
    state_hi: Array,
    input_lo: Array,
    input_hi: Array,
    n_samples: int = 400,
    seed: int = 0,
    safety: float = 1.25,
) -> tuple[float, float]:
    """Sampled Lipschitz constants (L_x, L_u) of the mode's vector field.

    For each sample, pairs a uniform base point with a second point offset in
    a random direction at a log-uniform scale (so both local slopes and
    box-spanning secants are probed) and takes the max difference quotient,
    inflated by ``safety``. Deterministic given the seed.
    """
    state_lo = np.asarray(state_lo, dtype=float)
    state_hi = np.asarray(state_hi, dtype=float)
    input_lo = np.asarray(input_lo, dtype=float)
    input_hi = np.asarray(input_hi, dtype=float)
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if np.any(state_hi <= state_lo) or np.any(input_hi <= input_lo):
        raise ValueError("sampling box is degenerate")

    rng = np.random.default_rng(seed)

    def paired(lo: Array, hi: Array) -> tuple[Array, Array]:
        span = float(np.linalg.norm(hi - lo))
        a = rng.uniform(lo, hi, size=(n_samples, lo.size))
        d = rng.normal(size=(n_samples, lo.size))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        scale = np.exp(rng.uniform(np.log(1e-4 * span), np.log(span), size=(n_samples, 1)))
        b = np.clip(a + scale * d, lo, hi)
        return a, b

    def max_ratio(fa: Array, fb: Array, a: Array, b: Array) -> float:
        num = np.linalg.norm(fa - fb, axis=1)
        den = np.linalg.norm(a - b, axis=1)
        keep = den > 0.0
        return float(np.max(num[keep] / den[keep])) if np.any(keep) else 0.0

    x1, x2 = paired(state_lo, state_hi)
    u_common = rng.uniform(input_lo, input_hi, size=(n_samples, input_lo.size))
    lx = max_ratio(mode.vector_field(x1, u_common), mode.vector_field(x2, u_common), x1, x2)

    u1, u2 = paired(input_lo, input_hi)
    x_common = rng.uniform(state_lo, state_hi, size=(n_samples, state_lo.size))
    lu = max_ratio(mode.vector_field(x_common, u1), mode.vector_field(x_common, u2), u1, u2)

    return safety * lx, safety * lu
