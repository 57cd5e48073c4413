"""Receding-horizon controller of the CAV.

The decision vector is ``x = [u_0 .. u_{T-1}, sigma_1 .. sigma_T]``: the CAV
accelerations over the horizon followed by one non-negative slack per step on
the safety constraint. The CAV states are affine in ``x`` under constant
acceleration dynamics, so the tracking problem condenses into a dense QP.
"""
from __future__ import annotations

import functools
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .estimator import DegenerateEstimateError, RlsState, gamma_to_cthrv
from .hdv_models import CthRvParams
from .predictor import EmptyPlatoonError, HdvPrediction, hdv2_reference_trajectory, predict_platoon
from .qp_solver import OPTIMAL, KktResiduals, QpProblem, QpSolution, solve_qp
from .vehicle_core import (
    DomainError,
    GapState,
    HeadwayPolicy,
    Limits,
    VehicleState,
    VEHICLE_LENGTH,
)

log = logging.getLogger(__name__)

BRAKE_TIME_CONSTANT = 1.0


@dataclass(frozen=True)
class MpcWeights:
    w_ep: float = 1.0
    w_ev: float = 0.1
    w_u: float = 1.0
    w_slack: float = 1e6

    def __post_init__(self):
        w = (self.w_ep, self.w_ev, self.w_u)
        if min(w) < 0.0 or max(w) == 0.0:
            raise DomainError(f"tracking weights must be non-negative and not all zero: {w}")
        if not self.w_slack > 0.0:
            raise DomainError(f"w_slack must be positive, got {self.w_slack}")


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 50
    limits: Limits = Limits()
    policy: HeadwayPolicy = HeadwayPolicy()
    l_c: float = VEHICLE_LENGTH
    weights: MpcWeights = MpcWeights()
    qp_tol: float = 1e-6
    qp_max_iter: int = 4000

    def __post_init__(self):
        if self.horizon < 1:
            raise DomainError(f"horizon must be at least 1, got {self.horizon}")

    @property
    def tau(self) -> float:
        return self.limits.tau


class CondensedMaps(NamedTuple):
    """Affine maps from the decision vector: ``e_p = ep0 - Ep @ u`` etc."""

    ep0: np.ndarray
    Ep: np.ndarray
    ev0: np.ndarray
    Ev: np.ndarray
    v0: np.ndarray
    Sv: np.ndarray
    horizon: int

    def e_p(self, x):
        return self.ep0 - self.Ep @ x[: self.horizon]

    def e_v(self, x):
        return self.ev0 - self.Ev @ x[: self.horizon]

    def speeds(self, x):
        return self.v0 + self.Sv @ x[: self.horizon]

    def slack(self, x):
        return x[self.horizon:]


@dataclass(frozen=True, eq=False)
class MpcSolution:
    u_sequence: np.ndarray
    e_p: np.ndarray
    e_v: np.ndarray
    slack: np.ndarray
    slack_max: float
    status: str
    qp: Optional[QpSolution] = None


@dataclass
class MpcDiagnostics:
    status: str
    iterations: int = 0
    kkt: KktResiduals = KktResiduals(0.0, 0.0, 0.0)
    slack_max: float = 0.0
    solve_time: float = 0.0
    fallback: bool = False
    collision_predicted: bool = False
    degenerate_estimates: List[int] = field(default_factory=list)


@functools.lru_cache(maxsize=16)
def _condensed_matrices(config: MpcConfig):
    """State-independent blocks of the condensed QP for one configuration."""
    T, tau = config.horizon, config.tau
    rho = config.policy.rho
    w = config.weights
    n_idx = np.arange(1, T + 1)[:, None]
    k_idx = np.arange(T)[None, :]
    lower = k_idx < n_idx
    Sv = np.where(lower, tau, 0.0)
    Sp = np.where(lower, tau * tau * (n_idx - k_idx - 0.5), 0.0)
    D = Sp + rho * Sv  # d(n) = e_p - rho*v - s_0 = c_d - D u
    Huu = w.w_ep * D.T @ D + w.w_ev * Sv.T @ Sv + w.w_u * np.eye(T)
    H = np.zeros((2 * T, 2 * T))
    H[:T, :T] = 0.5 * (Huu + Huu.T)
    H[T:, T:] = 2.0 * w.w_slack * np.eye(T)
    Z = np.zeros((T, T))
    A = np.vstack([
        np.hstack([Sv, Z]),          # v(n) <= v_max
        np.hstack([-Sv, Z]),         # v(n) >= v_min
        np.hstack([D, -np.eye(T)]),  # d(n) + sigma_n >= 0
    ])
    lim = config.limits
    lb = np.concatenate([np.full(T, lim.u_min), np.zeros(T)])
    ub = np.concatenate([np.full(T, lim.u_max), np.full(T, np.inf)])
    for arr in (Sv, Sp, D, H, A, lb, ub):
        arr.setflags(write=False)
    return Sv, Sp, D, H, A, lb, ub


def build_qp(cav: VehicleState, hdv2_pred: HdvPrediction, config: MpcConfig) -> Tuple[QpProblem, CondensedMaps]:
    """Condense the tracking problem around the CAV state and the predicted HDV-2 trajectory.

    Cost, per horizon step ``n = 1..T``::

        0.5 * [w_ep (e_p - rho v - s_0)^2 + w_ev e_v^2 + w_u u_{n-1}^2] + w_slack (sigma_n^2 + sigma_n)

    subject to acceleration bounds, speed bounds on the predicted CAV speed and
    the softened safety constraint ``e_p >= rho v + s_0 - sigma_n``.
    """
    T = config.horizon
    if hdv2_pred.positions.size != T + 1 or hdv2_pred.speeds.size != T + 1:
        raise ValueError(f"prediction has {hdv2_pred.positions.size} samples, expected {T + 1}")
    Sv, Sp, D, H, A, lb, ub = _condensed_matrices(config)
    tau, lim, pol, w = config.tau, config.limits, config.policy, config.weights
    steps = np.arange(1, T + 1)
    v_free = np.full(T, cav.v)
    p_free = cav.p + steps * tau * cav.v
    ep0 = hdv2_pred.positions[1:] - p_free - config.l_c
    ev0 = hdv2_pred.speeds[1:] - v_free
    c_d = ep0 - pol.rho * v_free - pol.s_0
    f = np.concatenate([
        -w.w_ep * D.T @ c_d - w.w_ev * Sv.T @ ev0,
        np.full(T, w.w_slack),
    ])
    b = np.concatenate([lim.v_max - v_free, v_free - lim.v_min, c_d])
    problem = QpProblem(H, f, A, b, lb, ub)
    maps = CondensedMaps(ep0, Sp, ev0, Sv, v_free, Sv, T)
    return problem, maps


def fallback_brake(cav: VehicleState, gap: Optional[GapState], config: MpcConfig) -> float:
    """Firm but bounded braking used when the QP is not solved: ``max(u_min, -v / 1 s)``."""
    lim = config.limits
    u = max(lim.u_min, -cav.v / BRAKE_TIME_CONSTANT)
    return max(u, (lim.v_min - cav.v) / lim.tau)


def cruise_hold(cav: VehicleState, config: MpcConfig) -> float:
    """Placeholder for the default cruise controller used when no HDV precedes the CAV."""
    return 0.0


def shift_warm_start(previous: MpcSolution) -> np.ndarray:
    """Drop the first input, repeat zero at the end; slacks are re-derived by the solver."""
    u = previous.u_sequence
    return np.concatenate([u[1:], [0.0], np.zeros(u.size)])


def slack_rows(horizon: int) -> np.ndarray:
    """Stacked QP row indices of the ``sigma_n >= 0`` bounds."""
    return np.arange(5 * horizon, 6 * horizon)


def shift_active_set(previous: Optional[MpcSolution], horizon: int) -> np.ndarray:
    """Warm-start working set: the previous active set moved one step earlier.

    Stacked rows come in six blocks of ``horizon`` (speed max, speed min,
    safety, u upper, u lower, slack lower); each row ``n`` maps to ``n - 1``
    in the same block and rows for the first step are discarded. The slack
    bounds are always included since they are active whenever the safety
    constraint is slack.
    """
    rows = [slack_rows(horizon)]
    if previous is not None and previous.qp is not None and previous.qp.active_set:
        idx = np.asarray(previous.qp.active_set, dtype=int)
        block, step = np.divmod(idx, horizon)
        keep = step >= 1
        rows.insert(0, block[keep] * horizon + step[keep] - 1)
    return np.concatenate(rows)


def resolve_params(
    hdv_ids: Sequence[int],
    estimates: Mapping[int, RlsState],
    last_valid: Dict[int, CthRvParams],
    default: CthRvParams,
    tau: float,
) -> Tuple[List[CthRvParams], List[int]]:
    """Map each HDV's estimate to CTH-RV parameters, falling back on degenerate estimates.

    ``last_valid`` is updated in place.
    """
    params, degenerate = [], []
    for vid in hdv_ids:
        try:
            prm = gamma_to_cthrv(estimates[vid].gamma_hat, tau)
            last_valid[vid] = prm
        except DegenerateEstimateError:
            degenerate.append(vid)
            prm = last_valid.get(vid, default)
        params.append(prm)
    return params, degenerate


def mpc_step(
    cav: VehicleState,
    hdv_ids: Sequence[int],
    hdv_states: Sequence[VehicleState],
    estimates: Mapping[int, RlsState],
    config: MpcConfig,
    *,
    stop_line_pos: float = 0.0,
    stop_line_active: bool = True,
    d_f: float = np.inf,
    last_valid: Optional[Dict[int, CthRvParams]] = None,
    default_params: Optional[CthRvParams] = None,
    warm_start: Optional[np.ndarray] = None,
    previous: Optional[MpcSolution] = None,
) -> Tuple[float, MpcSolution, MpcDiagnostics]:
    """Predict the HDVs, solve the condensed QP and return the first input.

    HDVs are ordered front to back, so the last entry is HDV-2. A QP that is
    not solved to optimality triggers :func:`fallback_brake`. Unless an
    explicit ``warm_start`` is given, the QP is seeded with the shifted
    active set of ``previous`` (see :func:`shift_active_set`). Raises
    :class:`EmptyPlatoonError` when no HDV precedes the CAV.
    """
    if not hdv_ids:
        raise EmptyPlatoonError("no HDV precedes the CAV; switch to cruise control")
    tau = config.tau
    last_valid = {} if last_valid is None else last_valid
    default_params = default_params or gamma_to_cthrv(np.array([0.67, 0.1, 0.18]), tau)
    params, degenerate = resolve_params(hdv_ids, estimates, last_valid, default_params, tau)
    preds = predict_platoon(
        hdv_states, params, stop_line_pos, config.l_c, config.horizon, tau, config.limits,
        stop_margin=config.policy.s_0, stop_line_active=stop_line_active, d_f=d_f,
        vehicle_ids=hdv_ids,
    )
    hdv2 = hdv2_reference_trajectory(preds)
    problem, maps = build_qp(cav, hdv2, config)

    if warm_start is None:
        warm_start = shift_active_set(previous, config.horizon)
    t0 = time.perf_counter()
    sol = solve_qp(problem, tol=config.qp_tol, max_iter=config.qp_max_iter, warm_start=warm_start)
    elapsed = time.perf_counter() - t0

    x = sol.x
    slack = np.maximum(maps.slack(x), 0.0)
    diag = MpcDiagnostics(
        status=sol.status,
        iterations=sol.iterations,
        kkt=sol.kkt,
        slack_max=float(np.max(slack)),
        solve_time=elapsed,
        collision_predicted=any(p.collision_predicted for p in preds),
        degenerate_estimates=degenerate,
    )
    mpc_sol = MpcSolution(
        u_sequence=x[: config.horizon].copy(),
        e_p=maps.e_p(x),
        e_v=maps.e_v(x),
        slack=slack,
        slack_max=diag.slack_max,
        status=sol.status,
        qp=sol,
    )
    if sol.status != OPTIMAL:
        log.warning("QP status %s after %d iterations; applying fallback braking", sol.status, sol.iterations)
        diag.fallback = True
        u = fallback_brake(cav, None, config)
    else:
        lim = config.limits
        u = min(max(float(x[0]), lim.u_min), lim.u_max)
    return u, mpc_sol, diag
