import math

import pytest
from hypothesis import given, strategies as st

from cavsafe.vehicle_core import (
    DomainError,
    GapState,
    HeadwayPolicy,
    Limits,
    VehicleState,
    gap_states,
    is_safe,
    safe_headway,
    step_dynamics,
)

LIM = Limits()
speeds = st.floats(0.0, 15.0)
accels = st.floats(-20.0, 20.0)


@pytest.mark.parametrize(
    "v, u, p_next, v_next, u_eff",
    [(10.0, 0.0, 1.0, 10.0, 0.0), (10.0, 2.0, 1.01, 10.2, 2.0), (0.0, -5.0, 0.0, 0.0, 0.0)],
)
def test_step_examples(v, u, p_next, v_next, u_eff):
    s = step_dynamics(VehicleState(0.0, v), u, LIM)
    assert s.p == pytest.approx(p_next, abs=1e-12)
    assert s.v == pytest.approx(v_next, abs=1e-12)
    assert s.u == pytest.approx(u_eff, abs=1e-12)


def test_step_lands_on_speed_ceiling():
    s = step_dynamics(VehicleState(0.0, 14.9), 3.0, LIM)
    assert s.v == 15.0
    assert s.u == pytest.approx(1.0)


def test_step_rejects_non_finite():
    with pytest.raises(DomainError):
        step_dynamics(VehicleState(0.0, 1.0), math.nan, LIM)


@given(speeds, st.floats(-5.0, 3.0))
def test_two_half_steps_equal_one_step(v, u):
    half = Limits(tau=0.05)
    s = VehicleState(0.0, v)
    # stay away from the speed bounds, where the clamp makes the split inexact
    if not 0.0 <= v + u * 0.1 <= 15.0:
        return
    one = step_dynamics(s, u, LIM)
    two = step_dynamics(step_dynamics(s, u, half), u, half)
    assert two.p == pytest.approx(one.p, abs=1e-12)
    assert two.v == pytest.approx(one.v, abs=1e-12)


@given(speeds, accels)
def test_step_stays_in_bounds(v, u):
    s = step_dynamics(VehicleState(-10.0, v), u, LIM)
    assert LIM.v_min <= s.v <= LIM.v_max
    assert LIM.u_min <= s.u <= LIM.u_max
    assert s.v == pytest.approx(v + s.u * LIM.tau, abs=1e-12)


def test_limits_validation():
    with pytest.raises(DomainError, match="v_min"):
        Limits(v_min=20.0)
    with pytest.raises(DomainError, match="tau"):
        Limits(tau=-0.1)


@pytest.mark.parametrize("v, expected", [(0.0, 3.0), (10.0, 23.0)])
def test_safe_headway_examples(v, expected):
    assert safe_headway(v, HeadwayPolicy()) == pytest.approx(expected)


@given(st.floats(0.1, 5.0), st.floats(0.1, 10.0))
def test_safe_headway_at_standstill_is_s0(rho, s0):
    assert safe_headway(0.0, HeadwayPolicy(rho, s0)) == s0


@given(speeds, speeds)
def test_safe_headway_affine_increasing(a, b):
    pol = HeadwayPolicy()
    lo, hi = sorted((a, b))
    assert safe_headway(lo, pol) <= safe_headway(hi, pol)
    mid = 0.5 * (lo + hi)
    assert safe_headway(mid, pol) == pytest.approx(0.5 * (safe_headway(lo, pol) + safe_headway(hi, pol)))


def test_safe_headway_rejects_negative_speed():
    with pytest.raises(DomainError):
        safe_headway(-1.0, HeadwayPolicy())


def test_gap_examples():
    g = gap_states(VehicleState(0.0, 10.0), VehicleState(30.0, 10.0), 5.0)
    assert (g.e_p, g.e_v) == (25.0, 0.0)
    assert gap_states(VehicleState(0.0, 3.0), VehicleState(5.0, 7.0), 5.0).e_p == 0.0


@given(speeds, speeds)
def test_swapping_roles_negates_e_v(v1, v2):
    a, b = VehicleState(0.0, v1), VehicleState(20.0, v2)
    assert gap_states(a, b, 5.0).e_v == -gap_states(b, a, 5.0).e_v


@pytest.mark.parametrize("e_p, v, safe", [(23.0, 10.0, True), (3.0, 0.0, True), (2.9, 0.0, False)])
def test_is_safe(e_p, v, safe):
    assert is_safe(GapState(e_p, 0.0), v, HeadwayPolicy()) is safe
