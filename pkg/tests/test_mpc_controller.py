import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from cavsafe.estimator import initial_rls_state
from cavsafe.hdv_models import CthRvParams
from cavsafe.mpc_controller import (
    MpcConfig,
    MpcWeights,
    build_qp,
    fallback_brake,
    mpc_step,
    resolve_params,
    shift_active_set,
    shift_warm_start,
    slack_rows,
)
from cavsafe.predictor import EmptyPlatoonError, HdvPrediction
from cavsafe.qp_solver import OPTIMAL
from cavsafe.qp_solver import solve_qp
from cavsafe.vehicle_core import DomainError, VehicleState, step_dynamics

CFG = MpcConfig()


def constant_speed(p0, v, T, tau=0.1):
    n = np.arange(T + 1)
    return HdvPrediction(p0 + v * tau * n, np.full(T + 1, float(v)))


def brute_force_cost(cav, hdv2, config, u0, u1):
    """Cost of the two-step problem on arrays of candidate inputs, slack chosen optimally."""
    tau, pol, w, lim = config.tau, config.policy, config.weights, config.limits
    total = 0.5 * w.w_u * (u0 ** 2 + u1 ** 2)
    p, v = cav.p, cav.v
    feasible = np.ones_like(u0, dtype=bool)
    for n, u in enumerate((u0, u1), start=1):
        p = p + v * tau + 0.5 * u * tau * tau
        v = v + u * tau
        feasible &= (v >= lim.v_min - 1e-12) & (v <= lim.v_max + 1e-12)
        e_p = hdv2.positions[n] - p - config.l_c
        e_v = hdv2.speeds[n] - v
        d = e_p - pol.rho * v - pol.s_0
        sigma = np.maximum(0.0, -d)
        total = total + 0.5 * (w.w_ep * d * d + w.w_ev * e_v * e_v) + w.w_slack * (sigma ** 2 + sigma)
    return np.where(feasible, total, np.inf)


@pytest.mark.parametrize("gap", [20.0, 40.0, 26.0])
def test_two_step_toy_matches_grid_search(gap):
    cfg = replace(CFG, horizon=2)
    cav = VehicleState(-50.0, 10.0)
    hdv2 = constant_speed(-50.0 + gap + cfg.l_c, 5.0, 2)
    prob, maps = build_qp(cav, hdv2, cfg)
    sol = solve_qp(prob)
    assert sol.status == OPTIMAL
    grid = np.round(np.arange(-5.0, 3.0 + 1e-9, 0.01), 10)
    U0, U1 = np.meshgrid(grid, grid, indexing="ij")
    cost = brute_force_cost(cav, hdv2, cfg, U0, U1)
    k = np.unravel_index(np.argmin(cost), cost.shape)
    best = np.array([U0[k], U1[k]])
    assert np.max(np.abs(sol.x[:2] - best)) <= 0.01 + 1e-9
    # the QP objective, shifted by the constant terms, is never above the grid minimum
    qp_cost = float(brute_force_cost(cav, hdv2, cfg, np.array(sol.x[0]), np.array(sol.x[1])))
    assert qp_cost <= cost[k] + 1e-9


def test_affine_maps_agree_with_forward_simulation():
    cfg = replace(CFG, horizon=10)
    cav = VehicleState(-80.0, 11.0)
    hdv2 = constant_speed(-40.0, 9.0, 10)
    _, maps = build_qp(cav, hdv2, cfg)
    u = np.linspace(-2.0, 1.0, 10)
    x = np.concatenate([u, np.zeros(10)])
    s = cav
    for n in range(10):
        s = step_dynamics(s, u[n], cfg.limits)
        assert maps.speeds(x)[n] == pytest.approx(s.v, abs=1e-12)
        assert maps.e_p(x)[n] == pytest.approx(hdv2.positions[n + 1] - s.p - cfg.l_c, abs=1e-10)
        assert maps.e_v(x)[n] == pytest.approx(hdv2.speeds[n + 1] - s.v, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(1e-3, 5.0), st.integers(1, 60))
def test_hessian_positive_definite(w_ep, w_ev, w_u, T):
    cfg = replace(CFG, horizon=T, weights=MpcWeights(w_ep, w_ev, w_u))
    prob, _ = build_qp(VehicleState(-50.0, 5.0), constant_speed(-20.0, 5.0, T), cfg)
    assert np.linalg.eigvalsh(prob.H)[0] > 0.0


def test_standstill_equilibrium_is_zero():
    cav = VehicleState(-20.0, 0.0)
    hdv2 = constant_speed(-20.0 + 3.0 + 5.0, 0.0, CFG.horizon)
    prob, _ = build_qp(cav, hdv2, CFG)
    sol = solve_qp(prob)
    assert sol.status == OPTIMAL
    assert np.max(np.abs(sol.x)) <= 1e-12


def test_pure_input_penalty():
    cfg = replace(CFG, horizon=1, weights=MpcWeights(0.0, 0.0, 1.0))
    sol = solve_qp(build_qp(VehicleState(-80.0, 8.0), constant_speed(-20.0, 8.0, 1), cfg)[0])
    assert sol.x[0] == pytest.approx(0.0, abs=1e-12)


def test_prediction_length_checked():
    with pytest.raises(ValueError):
        build_qp(VehicleState(-50.0, 5.0), constant_speed(-20.0, 5.0, 3), CFG)


def test_feasible_instance_needs_no_slack():
    cav = VehicleState(-100.0, 10.0)
    sol = solve_qp(build_qp(cav, constant_speed(-50.0, 10.0, CFG.horizon), CFG)[0])
    assert np.max(sol.x[CFG.horizon:]) <= 1e-6


def test_safety_holds_at_realized_state():
    # HDV-2 brakes exactly as predicted; whenever no slack is used the next gap is safe
    tau, T = CFG.tau, CFG.horizon
    p2, v2 = [-30.0], [10.0]
    for _ in range(400):
        p2.append(p2[-1] + v2[-1] * tau)
        v2.append(max(v2[-1] - 2.0 * tau, 0.0))
    p2, v2 = np.array(p2), np.array(v2)
    cav = VehicleState(-68.0, 11.0)
    for k in range(150):
        pred = HdvPrediction(p2[k:k + T + 1], v2[k:k + T + 1])
        sol = solve_qp(build_qp(cav, pred, CFG)[0])
        assert sol.status == OPTIMAL
        cav = step_dynamics(cav, sol.x[0], CFG.limits)
        if np.max(sol.x[T:]) <= 1e-6:
            e_p = p2[k + 1] - cav.p - CFG.l_c
            assert e_p >= CFG.policy.rho * cav.v + CFG.policy.s_0 - 1e-6


@pytest.mark.parametrize("v, u", [(0.0, 0.0), (10.0, -5.0), (0.3, -0.3)])
def test_fallback_brake(v, u):
    assert fallback_brake(VehicleState(-10.0, v), None, CFG) == pytest.approx(u)


def _step(cav, hdvs, cfg=CFG, **kw):
    ids = list(range(len(hdvs) + 1, 1, -1))
    est = {i: initial_rls_state() for i in ids}
    return mpc_step(cav, ids, hdvs, est, cfg, **kw)


def test_mpc_step_equilibrium():
    # stopped HDV-2 whose model keeps it stopped: it sits exactly s_0 behind the stop-line margin
    hdv = VehicleState(-3.0, 0.0)
    cav = VehicleState(-3.0 - 5.0 - 3.0, 0.0)
    u, sol, diag = _step(cav, [hdv])
    assert diag.status == OPTIMAL and not diag.fallback
    assert abs(u) <= 1e-8


def test_mpc_step_empty_platoon():
    with pytest.raises(EmptyPlatoonError):
        mpc_step(VehicleState(-10.0, 5.0), [], [], {}, CFG)


def test_forced_solver_failure_uses_fallback():
    cfg = replace(CFG, qp_max_iter=1)
    cav = VehicleState(-60.0, 12.0)
    u, sol, diag = _step(cav, [VehicleState(-30.0, 12.0)], cfg)
    assert diag.fallback and diag.status != OPTIMAL
    assert u == fallback_brake(cav, None, cfg)


def test_applied_input_within_bounds():
    lim = CFG.limits
    for p, v in [(-60.0, 15.0), (-20.0, 0.0), (-100.0, 2.0)]:
        u, sol, diag = _step(VehicleState(p - 30.0, v), [VehicleState(p, v)])
        assert lim.u_min <= u <= lim.u_max
        assert lim.v_min <= v + u * lim.tau <= lim.v_max + 1e-12
        assert np.all((sol.u_sequence >= lim.u_min - 1e-9) & (sol.u_sequence <= lim.u_max + 1e-9))


def test_shifted_active_set_warm_start():
    T = CFG.horizon
    cav, hdv = VehicleState(-60.0, 12.0), [VehicleState(-28.0, 11.0)]
    u1, s1, d1 = _step(cav, hdv)
    nxt_cav = step_dynamics(cav, u1, CFG.limits)
    nxt_hdv = [VehicleState(-28.0 + 1.1, 11.0)]
    cold = _step(nxt_cav, nxt_hdv)
    warm = _step(nxt_cav, nxt_hdv, previous=s1)
    assert warm[2].iterations <= 5
    assert np.allclose(warm[1].u_sequence, cold[1].u_sequence, atol=1e-7)
    rows = shift_active_set(s1, T)
    assert set(slack_rows(T)) <= set(rows.tolist())
    assert np.all((rows >= 0) & (rows < 6 * T))


def test_shift_warm_start_layout():
    T = CFG.horizon
    _, sol, _ = _step(VehicleState(-60.0, 12.0), [VehicleState(-28.0, 11.0)])
    ws = shift_warm_start(sol)
    assert ws.shape == (2 * T,)
    assert np.array_equal(ws[: T - 1], sol.u_sequence[1:]) and ws[T - 1] == 0.0


def test_degenerate_estimate_falls_back():
    bad = initial_rls_state()
    bad = type(bad)(np.array([0.67, 0.0, 0.18]), bad.P, bad.xi)
    default = CthRvParams(1.0, 1.8, 1.5)
    last = {3: CthRvParams(0.5, 1.0, 2.0)}
    params, degenerate = resolve_params([3, 2], {3: bad, 2: bad}, last, default, 0.1)
    assert degenerate == [3, 2]
    assert params == [CthRvParams(0.5, 1.0, 2.0), default]


def test_weight_validation():
    with pytest.raises(DomainError):
        MpcWeights(0.0, 0.0, 0.0)
    with pytest.raises(DomainError):
        MpcWeights(w_slack=0.0)
    with pytest.raises(DomainError):
        MpcConfig(horizon=0)
