"""Closed-loop simulation of a CAV behind a platoon of OVM-driven HDVs at a red light."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Set, Tuple

import numpy as np

from .estimator import (
    EstimatorConfig,
    RlsState,
    gamma_to_cthrv,
    initial_rls_state,
    make_regressor,
    rls_update,
    DegenerateEstimateError,
)
from .hdv_models import LOOK_AHEAD, OvmParams, observe_neighbor, ovm_accel, perturb_params
from .mpc_controller import MpcConfig, cruise_hold, mpc_step
from .qp_solver import OPTIMAL
from .vehicle_core import DomainError, VehicleState, VEHICLE_LENGTH, safe_headway, step_dynamics

log = logging.getLogger(__name__)

CAV_ID = 1
STOP_SPEED = 0.01
STOP_HOLD = 2.0
VIOLATION_SLACK = 1e-3

# ids in the trajectory table's ``ahead`` column for non-vehicle obstacles
AHEAD_STOP_LINE = 0
AHEAD_OPEN_ROAD = -1


@dataclass(frozen=True)
class ScenarioConfig:
    """Declarative scenario input.

    ``positions`` and ``speeds`` list every vehicle front to back (the leading
    HDV first, the CAV last). When omitted, the leader starts 60 m before the
    stop line and the others follow with 30 m bumper gaps, all at 12 m/s.
    ``departures`` holds ``(vehicle_id, time)`` pairs for HDVs leaving the lane.
    """

    n_vehicles: int = 3
    positions: Optional[Tuple[float, ...]] = None
    speeds: Optional[Tuple[float, ...]] = None
    p_0: float = 0.0
    hdv: OvmParams = OvmParams()
    perturbation: float = 0.2
    seed: int = 0
    duration: float = 400.0
    mpc: MpcConfig = MpcConfig()
    estimator: EstimatorConfig = EstimatorConfig()
    l_c: float = VEHICLE_LENGTH
    d_f: float = LOOK_AHEAD
    controller: str = "mpc"
    departures: Tuple[Tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.mpc.l_c != self.l_c:
            object.__setattr__(self, "mpc", replace(self.mpc, l_c=self.l_c))
        if self.n_vehicles < 2:
            raise DomainError("n_vehicles must be at least 2 (the CAV needs a preceding HDV)")
        if self.controller not in ("mpc", "ovm"):
            raise DomainError(f"controller must be 'mpc' or 'ovm', got {self.controller!r}")
        if not 0.0 <= self.perturbation < 1.0:
            raise DomainError(f"perturbation must lie in [0, 1), got {self.perturbation}")
        if self.duration < 0.0:
            raise DomainError(f"duration must be non-negative, got {self.duration}")
        if self.l_c <= 0.0 or self.d_f <= 0.0:
            raise DomainError("l_c and d_f must be positive")
        positions, speeds = self.layout()
        lim = self.mpc.limits
        for i in range(1, len(positions)):
            if positions[i - 1] - positions[i] - self.l_c <= 0.0:
                raise DomainError(f"positions: vehicles {i - 1} and {i} overlap or are out of order")
        for v in speeds:
            if not lim.v_min <= v <= lim.v_max:
                raise DomainError(f"speeds: {v} outside [{lim.v_min}, {lim.v_max}]")

    def layout(self) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
        n = self.n_vehicles
        positions = self.positions
        if positions is None:
            positions = tuple(self.p_0 - 60.0 - i * (30.0 + self.l_c) for i in range(n))
        speeds = self.speeds if self.speeds is not None else (12.0,) * n
        if len(positions) != n:
            raise DomainError(f"positions: expected {n} entries, got {len(positions)}")
        if len(speeds) != n:
            raise DomainError(f"speeds: expected {n} entries, got {len(speeds)}")
        return tuple(float(p) for p in positions), tuple(float(v) for v in speeds)

    @property
    def vehicle_ids(self) -> List[int]:
        """Identities front to back: HDV-N ... HDV-2, then the CAV (1)."""
        return list(range(self.n_vehicles, 0, -1))


class VehicleRecord(NamedTuple):
    t: float
    id: int
    p: float
    v: float
    u: float
    delta_p: float
    delta_v: float
    ahead: int


class CavRecord(NamedTuple):
    t: float
    e_p: float
    e_v: float
    s1: float
    slack: float
    solver_status: str
    solve_time: float
    iterations: int
    kkt_max: float
    fallback: int


class EstimateRecord(NamedTuple):
    t: float
    hdv_id: int
    gamma1: float
    gamma2: float
    gamma3: float
    eta: float
    nu: float
    rho: float
    residual: float


@dataclass
class SimTrace:
    tau: float
    vehicles: List[VehicleRecord] = field(default_factory=list)
    cav: List[CavRecord] = field(default_factory=list)
    estimates: List[EstimateRecord] = field(default_factory=list)
    collision: bool = False
    events: List[str] = field(default_factory=list)
    limits: Optional[object] = None

    @property
    def times(self) -> List[float]:
        return [r.t for r in self.cav]


@dataclass
class Metrics:
    steps: int
    final_time: float
    collision: bool
    stopped: bool
    min_safety_margin: float
    min_gap: float
    final_cav_gap: float
    violation_count: int
    max_slack: float
    fallback_count: int
    control_effort: float
    terminal_speeds: Dict[int, float]
    max_abs_u: Dict[int, float]
    bounds_ok: bool
    solve_time_median: float
    solve_time_p95: float

    def flat(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        for k, v in self.__dict__.items():
            if isinstance(v, dict):
                for vid, x in sorted(v.items()):
                    out[f"{k}.{vid}"] = x
            else:
                out[k] = v
        return out


@dataclass
class VehicleSets:
    """Vehicles still approaching the intersection, front to back; the CAV is last."""

    order: List[int]

    @property
    def hdvs(self) -> List[int]:
        return [vid for vid in self.order if vid != CAV_ID]

    @property
    def hdv2(self) -> Optional[int]:
        hdvs = self.hdvs
        return hdvs[-1] if hdvs else None


def update_vehicle_sets(
    sets: VehicleSets,
    vehicle_positions: Dict[int, float],
    p_0: float,
    lane_events: Set[int] = frozenset(),
) -> VehicleSets:
    """Remove HDVs that crossed the stop line or left the lane; re-derive the order."""
    keep = [
        vid for vid in sets.order
        if vid == CAV_ID or (vid not in lane_events and vehicle_positions[vid] <= p_0)
    ]
    keep.sort(key=lambda vid: -vehicle_positions[vid])
    return VehicleSets(keep)


class CavEstimators:
    """One RLS estimator per HDV identity, updated from the previous step's regressor."""

    def __init__(self, config: EstimatorConfig, tau: float):
        self.config = config
        self.tau = tau
        self.states: Dict[int, RlsState] = {}
        self.prev_phi: Dict[int, np.ndarray] = {}
        self.last_valid = {}
        self.default_params = gamma_to_cthrv(config.gamma0, tau)

    def update(self, vid: int, v_now: float, phi_now: np.ndarray) -> float:
        state = self.states.get(vid)
        if state is None:
            state = self.states[vid] = initial_rls_state(self.config)
        residual = math.nan
        phi = self.prev_phi.get(vid)
        if phi is not None:
            state, residual = rls_update(state, phi, v_now, reset_state=initial_rls_state(self.config))
            self.states[vid] = state
        self.prev_phi[vid] = phi_now
        return residual


def run_simulation(config: ScenarioConfig) -> Tuple[SimTrace, "Metrics"]:
    """Run one closed-loop scenario.

    Every step: each HDV observes what is ahead and applies its OVM
    acceleration; the CAV updates its estimators with the newly measured
    speeds and solves the MPC problem; then all vehicles advance together.
    The run stops at ``duration``, on bumper contact, or once every speed
    stayed below 0.01 m/s for 2 s.
    """
    mpc_cfg = config.mpc
    limits = mpc_cfg.limits
    tau = limits.tau
    positions, speeds = config.layout()
    ids = config.vehicle_ids
    states = {vid: VehicleState(p, v) for vid, p, v in zip(ids, positions, speeds)}

    rng = np.random.default_rng(config.seed)
    hdv_params = {vid: perturb_params(config.hdv, config.perturbation, rng) for vid in ids if vid != CAV_ID}
    estimators = CavEstimators(config.estimator, tau)
    departures = sorted((t, vid) for vid, t in config.departures)

    trace = SimTrace(tau=tau, limits=limits)
    sets = VehicleSets(list(ids))
    n_steps = int(round(config.duration / tau))
    hold_steps = int(round(STOP_HOLD / tau))
    still = 0
    warm = None

    for k in range(n_steps + 1):
        t = k * tau
        order = sets.order
        final = k == n_steps or still >= hold_steps

        obs, ahead = {}, {}
        for idx, vid in enumerate(order):
            pred = states[order[idx - 1]] if idx > 0 else None
            o = observe_neighbor(states[vid], pred, True, config.p_0, config.l_c, config.d_f)
            obs[vid] = o
            if o.source == "vehicle":
                ahead[vid] = order[idx - 1]
            else:
                ahead[vid] = AHEAD_STOP_LINE if o.source == "stop_line" else AHEAD_OPEN_ROAD
        collision = any(ahead[vid] > 0 and obs[vid].delta_p <= 0.0 for vid in order)
        if collision:
            trace.collision = True
            trace.events.append(f"t={t:.1f}: bumper contact")
            final = True

        hdv_ids = sets.hdvs
        for vid in hdv_ids:
            s, o = states[vid], obs[vid]
            residual = estimators.update(vid, s.v, make_regressor(s.v, o.delta_p, s.v + o.delta_v))
            g = estimators.states[vid].gamma_hat
            try:
                prm = gamma_to_cthrv(g, tau)
                eta, nu, rho = prm.eta, prm.nu, prm.rho
            except DegenerateEstimateError:
                eta = nu = rho = math.nan
            trace.estimates.append(EstimateRecord(t, vid, g[0], g[1], g[2], eta, nu, rho, residual))

        u_cmd = {vid: ovm_accel(hdv_params[vid], obs[vid], states[vid].v, limits) for vid in hdv_ids}
        cav = states[CAV_ID]
        s1 = safe_headway(cav.v, mpc_cfg.policy)
        if config.controller == "ovm":
            u_cmd[CAV_ID] = ovm_accel(config.hdv, obs[CAV_ID], cav.v, limits)
            cav_row = (math.nan, "ovm", 0.0, 0, 0.0, 0)
        elif hdv_ids:
            u, sol, diag = mpc_step(
                cav, hdv_ids, [states[v] for v in hdv_ids], estimators.states, mpc_cfg,
                stop_line_pos=config.p_0, d_f=config.d_f,
                last_valid=estimators.last_valid, default_params=estimators.default_params,
                previous=warm,
            )
            warm = sol if sol.status == OPTIMAL else None
            u_cmd[CAV_ID] = u
            cav_row = (diag.slack_max, diag.status, diag.solve_time, diag.iterations, diag.kkt.max(), int(diag.fallback))
        else:
            u_cmd[CAV_ID] = cruise_hold(cav, mpc_cfg)
            cav_row = (math.nan, "cruise", 0.0, 0, 0.0, 0)

        next_states = {vid: step_dynamics(states[vid], u_cmd[vid], limits) for vid in order}
        for vid in order:
            s = states[vid]
            trace.vehicles.append(VehicleRecord(
                t, vid, s.p, s.v, next_states[vid].u, obs[vid].delta_p, obs[vid].delta_v, ahead[vid],
            ))
        if hdv_ids:
            e_p, e_v = obs[CAV_ID].delta_p, obs[CAV_ID].delta_v
        else:
            e_p = e_v = math.nan
        trace.cav.append(CavRecord(t, e_p, e_v, s1, *cav_row))

        if final:
            break
        states = next_states
        still = still + 1 if all(s.v < STOP_SPEED for s in states.values()) else 0

        leaving = set()
        while departures and departures[0][0] <= t + tau + 1e-9:
            leaving.add(departures.pop(0)[1])
        new_sets = update_vehicle_sets(sets, {v: states[v].p for v in sets.order}, config.p_0, leaving)
        if new_sets.order != sets.order:
            gone = sorted(set(sets.order) - set(new_sets.order))
            trace.events.append(f"t={t + tau:.1f}: vehicles {gone} left; HDV-2 is now {new_sets.hdv2}")
            for vid in gone:
                del states[vid]
            warm = None
        sets = new_sets

    return trace, compute_metrics(trace)


def compute_metrics(trace: SimTrace) -> Metrics:
    if not trace.cav:
        raise ValueError("empty trace")
    tau = trace.tau
    cav_rows = trace.cav
    margins = [r.e_p - r.s1 for r in cav_rows if not math.isnan(r.e_p)]
    gaps = [r.delta_p for r in trace.vehicles if r.ahead > 0]
    slacks = [r.slack for r in cav_rows if not math.isnan(r.slack)]
    last_t = cav_rows[-1].t
    terminal = {r.id: r.v for r in trace.vehicles if r.t == last_t}
    max_u: Dict[int, float] = {}
    bounds_ok = True
    lim = trace.limits
    for r in trace.vehicles:
        max_u[r.id] = max(max_u.get(r.id, 0.0), abs(r.u))
        if lim is not None and not (
            lim.u_min - 1e-9 <= r.u <= lim.u_max + 1e-9 and lim.v_min - 1e-9 <= r.v <= lim.v_max + 1e-9
        ):
            bounds_ok = False
    cav_u = [r.u for r in trace.vehicles if r.id == CAV_ID]
    solve_times = [r.solve_time for r in cav_rows if r.solver_status not in ("ovm", "cruise")]
    return Metrics(
        steps=len(cav_rows),
        final_time=last_t,
        collision=trace.collision,
        stopped=all(v <= STOP_SPEED for v in terminal.values()),
        min_safety_margin=min(margins) if margins else math.nan,
        min_gap=min(gaps) if gaps else math.nan,
        final_cav_gap=cav_rows[-1].e_p,
        violation_count=sum(1 for s in slacks if s > VIOLATION_SLACK),
        max_slack=max(slacks) if slacks else 0.0,
        fallback_count=sum(r.fallback for r in cav_rows),
        control_effort=float(sum(u * u for u in cav_u) * tau),
        terminal_speeds=terminal,
        max_abs_u=max_u,
        bounds_ok=bounds_ok,
        solve_time_median=float(np.median(solve_times)) if solve_times else 0.0,
        solve_time_p95=float(np.percentile(solve_times, 95)) if solve_times else 0.0,
    )
