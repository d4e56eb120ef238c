"""Bouncing-ball hybrid plant: nonlinear drag, floor/wall bounces, circular target.

Two modes: outside the circle (thrust clamped to non-positive components,
gravity acts) and inside the circle (full thrust authority, no gravity, so the
center is an equilibrium with zero input). Guards: the floor y = 0 and the
wall x = 0 (velocity-reflection resets, mode self-loops) and the circle
boundary (identity reset into the inside mode).

States are expressed in coordinates shifted so the circle center with zero
velocity is the origin: s = [x - cx, y - cy, vx, vy].
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .hybridsys import Guard, HybridSystem, Mode, ResetMap

Array = np.ndarray

OUTSIDE = "outside"
INSIDE = "inside"
FLOOR = "floor"
WALL = "wall"
CIRCLE = "circle"


@dataclass(frozen=True)
class BallParams:
    """Physical and geometric parameters of the ball plant.

    ``gamma_drag`` keeps its reported negative sign; the implemented drag term
    is dissipative with magnitude ``|gamma_drag|`` regardless of sign. ``g``
    is signed so gravity pulls toward the floor. ``softmin_width > 0`` smooths
    the outside-mode thrust clamp min(u, 0) for gradient-based planning; the
    simulation truth uses width 0 (exact clamp).
    """

    m: float = 1.0
    gamma_drag: float = -0.02
    g: float = -9.81
    circle_center: tuple[float, float] = (2.0, 2.0)
    circle_radius: float = 0.5
    input_lo: float = -100.0
    input_hi: float = 100.0
    eta: float = 10.0
    softmin_width: float = 0.0
    domain_tol: float = 1e-9

    def __post_init__(self):
        cx, cy = self.circle_center
        if not (cx > self.circle_radius > 0 and cy > self.circle_radius):
            raise ValueError("circle must lie strictly inside the first quadrant")

    def to_shifted(self, s_phys: Array) -> Array:
        s = np.asarray(s_phys, dtype=float).copy()
        s[..., 0] -= self.circle_center[0]
        s[..., 1] -= self.circle_center[1]
        return s

    def to_physical(self, s: Array) -> Array:
        out = np.asarray(s, dtype=float).copy()
        out[..., 0] += self.circle_center[0]
        out[..., 1] += self.circle_center[1]
        return out


def _drag(vel: Array, gamma: float) -> Array:
    # dissipative quadratic drag; magnitude of the coefficient is what matters
    speed2 = np.sum(vel * vel, axis=-1, keepdims=True)
    return -abs(gamma) * speed2 * vel


def _softmin0(u: Array, width: float) -> Array:
    if width <= 0.0:
        return np.minimum(u, 0.0)
    return 0.5 * (u - np.sqrt(u * u + width * width) + width)


def ball_system(p: BallParams = BallParams()) -> HybridSystem:
    """Build the two-mode ball system in shifted coordinates."""
    cx, cy = p.circle_center
    r = p.circle_radius
    tol = p.domain_tol

    def outside_field(s: Array, u: Array) -> Array:
        vel = s[..., 2:4]
        acc = _drag(vel, p.gamma_drag) + _softmin0(u, p.softmin_width) / p.m
        acc = acc.copy()
        acc[..., 1] += p.g
        return np.concatenate([vel, acc], axis=-1)

    def inside_field(s: Array, u: Array) -> Array:
        vel = s[..., 2:4]
        acc = _drag(vel, p.gamma_drag) + u / p.m
        return np.concatenate([vel, acc], axis=-1)

    def dist(s: Array) -> Array:
        return np.sqrt(s[..., 0] ** 2 + s[..., 1] ** 2)

    lo = np.full(2, p.input_lo)
    hi = np.full(2, p.input_hi)
    modes = {
        OUTSIDE: Mode(
            id=OUTSIDE,
            vector_field=outside_field,
            input_lo=lo,
            input_hi=hi,
            domain_check=lambda s: bool(
                s[0] + cx >= -tol and s[1] + cy >= -tol and dist(s) >= r - tol
            ),
        ),
        INSIDE: Mode(
            id=INSIDE,
            vector_field=inside_field,
            input_lo=lo,
            input_hi=hi,
            domain_check=lambda s: bool(dist(s) <= r + tol),
        ),
    }

    guards = {
        FLOOR: Guard(
            id=FLOOR,
            source_mode=OUTSIDE,
            target_mode=OUTSIDE,
            h=lambda s: s[..., 1] + cy,
            c=0.0,
            crossing_sign=-1,
            lip_h=1.0,
        ),
        WALL: Guard(
            id=WALL,
            source_mode=OUTSIDE,
            target_mode=OUTSIDE,
            h=lambda s: s[..., 0] + cx,
            c=0.0,
            crossing_sign=-1,
            lip_h=1.0,
        ),
        CIRCLE: Guard(
            id=CIRCLE,
            source_mode=OUTSIDE,
            target_mode=INSIDE,
            h=dist,
            c=r,
            crossing_sign=-1,
            lip_h=1.0,
        ),
    }

    def reflect(index: int):
        def _map(s: Array) -> Array:
            out = np.asarray(s, dtype=float).copy()
            out[..., index] = -out[..., index]
            return out

        return _map

    resets = {
        FLOOR: ResetMap(FLOOR, reflect(3)),
        WALL: ResetMap(WALL, reflect(2)),
        CIRCLE: ResetMap(CIRCLE, lambda s: np.asarray(s, dtype=float).copy()),
    }

    return HybridSystem(modes=modes, guards=guards, resets=resets, final_mode=INSIDE)


def planning_params(p: BallParams, width: float = 1e-3) -> BallParams:
    """Parameters for the transcription model: smoothed thrust clamp."""
    return replace(p, softmin_width=width)


def infer_mode(system: HybridSystem, s: Array) -> str:
    """Mode whose domain contains s; inside wins on the circle boundary."""
    if system.modes[INSIDE].domain_check(s):
        return INSIDE
    if system.modes[OUTSIDE].domain_check(s):
        return OUTSIDE
    raise ValueError(f"state {s} lies in no mode domain")
