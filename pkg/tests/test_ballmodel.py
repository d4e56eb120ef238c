"""Ball plant tests: hand-computed field values, reset algebra, dissipation."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layeredmpc.ballmodel import (
    BallParams,
    CIRCLE,
    FLOOR,
    INSIDE,
    OUTSIDE,
    WALL,
    ball_system,
    infer_mode,
    planning_params,
)
from layeredmpc.hybridsys import apply_reset, flow_fixed, guard_value


@pytest.fixture
def params():
    return BallParams()


@pytest.fixture
def sys(params):
    return ball_system(params)


# ---------------------------------------------------------------------------
# vector fields


def test_outside_field_hand_value(sys):
    # s = [0, 1, 3, 4] shifted, u = [5, -7]:
    #   speed^2 = 25, drag = -0.02 * 25 * v = [-1.5, -2.0]
    #   thrust min(u,0)/m = [0, -7]; gravity -9.81 on y
    s = np.array([0.0, 1.0, 3.0, 4.0])
    u = np.array([5.0, -7.0])
    out = sys.mode(OUTSIDE).vector_field(s, u)
    assert np.allclose(out, [3.0, 4.0, -1.5, -18.81], atol=1e-12)


def test_inside_field_hand_value(sys):
    # full thrust authority, no gravity
    s = np.array([0.0, 1.0, 3.0, 4.0])
    u = np.array([5.0, -7.0])
    out = sys.mode(INSIDE).vector_field(s, u)
    assert np.allclose(out, [3.0, 4.0, 3.5, -9.0], atol=1e-12)


def test_outside_mode_ignores_positive_thrust_exactly(sys):
    s = np.array([0.0, 3.0, 0.0, 0.0])
    pushed = sys.mode(OUTSIDE).vector_field(s, np.array([60.0, 80.0]))
    idle = sys.mode(OUTSIDE).vector_field(s, np.zeros(2))
    assert np.array_equal(pushed, idle)


def test_center_is_equilibrium_of_inside_mode(sys):
    out = sys.mode(INSIDE).vector_field(np.zeros(4), np.zeros(2))
    assert np.array_equal(out, np.zeros(4))


def test_drag_sign_is_dissipative_regardless_of_reported_sign():
    for gamma in (-0.02, 0.02):
        sysg = ball_system(BallParams(gamma_drag=gamma))
        s = np.array([0.0, 0.0, 2.0, 0.0])
        out = sysg.mode(INSIDE).vector_field(s, np.zeros(2))
        assert out[2] < 0.0  # decelerates positive vx
        assert out[2] == pytest.approx(-0.02 * 4.0 * 2.0)


@settings(max_examples=60, deadline=None)
@given(
    vx=st.floats(-8, 8, allow_nan=False),
    vy=st.floats(-8, 8, allow_nan=False),
)
def test_coasting_inside_never_gains_kinetic_energy(vx, vy):
    sysb = ball_system()
    s0 = np.array([0.0, 0.0, vx, vy])
    s1 = flow_fixed(sysb.mode(INSIDE), s0, np.zeros(2), 0.05)
    ke0 = vx * vx + vy * vy
    ke1 = s1[2] ** 2 + s1[3] ** 2
    assert ke1 <= ke0 + 1e-12


def test_smoothed_clamp_stays_within_half_width():
    p = planning_params(BallParams(), width=1e-3)
    sysp = ball_system(p)
    s = np.array([0.0, 3.0, 0.0, 0.0])
    for ux in np.linspace(-20.0, 20.0, 41):
        u = np.array([ux, 0.0])
        smooth = sysp.mode(OUTSIDE).vector_field(s, u)[2]
        exact = ball_system().mode(OUTSIDE).vector_field(s, u)[2]
        gap = smooth - exact
        assert -1e-15 <= gap <= 0.5 * 1e-3 + 1e-15


def test_planning_params_only_changes_smoothing(params):
    p = planning_params(params)
    assert p.softmin_width == 1e-3
    assert p.m == params.m and p.circle_center == params.circle_center


# ---------------------------------------------------------------------------
# guards


def test_guard_values_at_landmarks(sys, params):
    center = np.zeros(4)
    # circle guard measured from the center: inside by the full radius
    assert guard_value(sys.guard(CIRCLE), center) == pytest.approx(params.circle_radius)
    on_boundary = np.array([params.circle_radius, 0.0, 0.0, 0.0])
    assert guard_value(sys.guard(CIRCLE), on_boundary) == pytest.approx(0.0, abs=1e-15)

    # physical point half a unit above the floor
    s = params.to_shifted(np.array([1.0, 0.5, 0.0, 0.0]))
    assert guard_value(sys.guard(FLOOR), s) == pytest.approx(-0.5)
    # and half a unit past it
    s = params.to_shifted(np.array([1.0, -0.5, 0.0, 0.0]))
    assert guard_value(sys.guard(FLOOR), s) == pytest.approx(0.5)

    s = params.to_shifted(np.array([0.25, 1.0, 0.0, 0.0]))
    assert guard_value(sys.guard(WALL), s) == pytest.approx(-0.25)


def test_guard_lipschitz_constants_declared(sys):
    for gid in (FLOOR, WALL, CIRCLE):
        assert sys.guard(gid).lip_h == 1.0


def test_guard_edges(sys):
    assert sys.guard(FLOOR).source_mode == OUTSIDE and sys.guard(FLOOR).target_mode == OUTSIDE
    assert sys.guard(WALL).source_mode == OUTSIDE and sys.guard(WALL).target_mode == OUTSIDE
    assert sys.guard(CIRCLE).source_mode == OUTSIDE and sys.guard(CIRCLE).target_mode == INSIDE
    assert sys.final_mode == INSIDE


# ---------------------------------------------------------------------------
# resets


def test_floor_reset_reflects_vertical_velocity(sys, params):
    s = params.to_shifted(np.array([1.0, 0.0, 2.0, -3.0]))
    out = params.to_physical(apply_reset(sys, FLOOR, s))
    assert np.allclose(out, [1.0, 0.0, 2.0, 3.0], atol=1e-12)


def test_wall_reset_reflects_horizontal_velocity(sys, params):
    s = params.to_shifted(np.array([0.0, 1.0, -2.0, 3.0]))
    out = params.to_physical(apply_reset(sys, WALL, s))
    assert np.allclose(out, [0.0, 1.0, 2.0, 3.0], atol=1e-12)


def test_circle_reset_is_identity(sys, params):
    s = np.array([0.0, -params.circle_radius, 1.0, 2.0])
    out = apply_reset(sys, CIRCLE, s)
    assert np.array_equal(out, s)
    assert out is not s


@settings(max_examples=40, deadline=None)
@given(
    x=st.floats(0.0, 5.0, allow_nan=False),
    vx=st.floats(-6, 6, allow_nan=False),
    vy=st.floats(-6, 6, allow_nan=False),
)
def test_bounce_resets_are_involutions(x, vx, vy):
    p = BallParams()
    sysb = ball_system(p)
    s = p.to_shifted(np.array([x, 0.0, vx, vy]))
    twice = apply_reset(sysb, FLOOR, apply_reset(sysb, FLOOR, s))
    assert np.array_equal(twice, s)


# ---------------------------------------------------------------------------
# frames, domains, validation


def test_shift_roundtrip(params):
    s = np.array([0.3, 4.2, -1.0, 2.5])
    assert np.allclose(params.to_physical(params.to_shifted(s)), s, atol=1e-15)
    assert np.allclose(params.to_shifted(np.array([2.0, 2.0, 0.0, 0.0])), np.zeros(4), atol=1e-15)


def test_infer_mode(sys, params):
    assert infer_mode(sys, np.zeros(4)) == INSIDE
    assert infer_mode(sys, params.to_shifted(np.array([1.0, 3.0, 0.0, 0.0]))) == OUTSIDE
    # boundary belongs to the inside mode
    assert infer_mode(sys, np.array([params.circle_radius, 0.0, 0.0, 0.0])) == INSIDE
    with pytest.raises(ValueError):
        infer_mode(sys, params.to_shifted(np.array([-1.0, 1.0, 0.0, 0.0])))


def test_params_reject_circle_touching_walls():
    with pytest.raises(ValueError):
        BallParams(circle_center=(0.4, 2.0), circle_radius=0.5)
    with pytest.raises(ValueError):
        BallParams(circle_center=(2.0, 0.3), circle_radius=0.5)


def test_default_parameter_values(params):
    assert params.m == 1.0
    assert params.gamma_drag == -0.02
    assert params.g == -9.81
    assert params.circle_center == (2.0, 2.0)
    assert params.circle_radius == 0.5
    assert params.input_lo == -100.0 and params.input_hi == 100.0
    assert params.eta == 10.0
