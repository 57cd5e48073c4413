"""Human-driver models.

The optimal velocity model (OVM) drives the simulated human vehicles. The CAV
never sees it; internally it represents every HDV by the linear constant time
headway relative velocity (CTH-RV) model whose parameters it identifies online.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from .vehicle_core import DomainError, Limits, VehicleState, VEHICLE_LENGTH

# Look-ahead distance beyond which a predecessor (or the stop line) is not perceived.
LOOK_AHEAD = 100.0


@dataclass(frozen=True)
class OvmParams:
    alpha: float = 0.8
    beta: float = 0.6
    v_d: float = 15.0
    rho: float = 2.0
    s_0: float = 5.0

    def __post_init__(self):
        if not (self.alpha > 0.0 and self.beta >= 0.0 and self.v_d > 0.0):
            raise DomainError(f"invalid OVM parameters: {self}")


@dataclass(frozen=True)
class CthRvParams:
    eta: float
    nu: float
    rho: float

    def __post_init__(self):
        if not (self.eta > 0.0 and self.nu >= 0.0 and self.rho > 0.0):
            raise DomainError(f"invalid CTH-RV parameters: {self}")


@dataclass(frozen=True)
class NeighborObservation:
    """Headway ``delta_p`` (m) and approach rate ``delta_v`` (m/s) perceived by one vehicle.

    ``source`` says what the headway is measured to: ``"vehicle"``,
    ``"stop_line"`` or ``"open_road"``.
    """

    delta_p: float
    delta_v: float
    source: str = "vehicle"


def observe_neighbor(
    ego: VehicleState,
    predecessor: Optional[VehicleState],
    stop_line_active: bool,
    stop_line_pos: float = 0.0,
    l_c: float = VEHICLE_LENGTH,
    d_f: float = LOOK_AHEAD,
) -> NeighborObservation:
    """Headway and approach rate with respect to whatever is immediately ahead.

    A predecessor within ``d_f`` gives the usual bumper gap and speed
    difference. An active stop line within ``d_f`` and closer than any
    predecessor acts as a stationary wall (``delta_v = -v``). With nothing in
    range the road is treated as open: ``delta_p = d_f`` and ``delta_v = 0``.
    """
    best = None
    if predecessor is not None:
        gap = predecessor.p - ego.p - l_c
        if gap <= d_f:
            best = NeighborObservation(gap, predecessor.v - ego.v)
    if stop_line_active:
        d_s = stop_line_pos - ego.p
        if 0.0 <= d_s <= d_f and (best is None or d_s < best.delta_p):
            best = NeighborObservation(d_s, -ego.v, "stop_line")
    if best is None:
        best = NeighborObservation(d_f, 0.0, "open_road")
    return best


def ovm_optimal_speed(params: OvmParams, delta_p: float, v: float) -> float:
    s = params.rho * v + params.s_0
    return 0.5 * params.v_d * (math.tanh(delta_p - s) + math.tanh(s))


def ovm_accel(params: OvmParams, obs: NeighborObservation, v: float, limits: Limits) -> float:
    if v < 0.0:
        raise DomainError(f"speed must be non-negative, got {v}")
    target = ovm_optimal_speed(params, obs.delta_p, v)
    u = params.alpha * (target - v) + params.beta * obs.delta_v
    return min(max(u, limits.u_min), limits.u_max)


def cthrv_speed_next(
    params: CthRvParams,
    v: float,
    delta_p: float,
    v_pred: float,
    tau: float,
    limits: Optional[Limits] = None,
) -> float:
    """One-step speed map of the CTH-RV model, optionally clamped to the speed bounds."""
    if not tau > 0.0:
        raise DomainError(f"tau must be positive, got {tau}")
    v_next = v + params.eta * (delta_p - params.rho * v) * tau + params.nu * (v_pred - v) * tau
    if limits is not None:
        v_next = min(max(v_next, limits.v_min), limits.v_max)
    return v_next


def perturb_params(nominal: OvmParams, fraction: float, rng_seed=None) -> OvmParams:
    """Scale every OVM parameter by an independent factor drawn from U[1-fraction, 1+fraction].

    ``rng_seed`` may be an integer seed or a ``numpy.random.Generator`` (which
    is advanced in place, so successive calls draw fresh factors).
    """
    if not 0.0 <= fraction < 1.0:
        raise DomainError(f"fraction must lie in [0, 1), got {fraction}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    names = [f.name for f in fields(OvmParams)]
    factors = rng.uniform(1.0 - fraction, 1.0 + fraction, size=len(names))
    return replace(nominal, **{n: getattr(nominal, n) * float(k) for n, k in zip(names, factors)})
