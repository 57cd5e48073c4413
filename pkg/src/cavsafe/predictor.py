"""Horizon roll-out of the identified HDV models, leader first."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .hdv_models import CthRvParams
from .vehicle_core import Limits, VehicleState

log = logging.getLogger(__name__)


class EmptyPlatoonError(LookupError):
    """No human-driven vehicle precedes the CAV."""


@dataclass(frozen=True, eq=False)
class HdvPrediction:
    """Predicted positions and speeds over ``horizon + 1`` samples; index 0 is the measurement."""

    positions: np.ndarray
    speeds: np.ndarray
    vehicle_id: Optional[int] = None
    collision_predicted: bool = False


def predict_platoon(
    hdv_states: Sequence[VehicleState],
    params: Sequence[CthRvParams],
    stop_line_pos: float,
    l_c: float,
    horizon: int,
    tau: float,
    limits: Limits,
    stop_margin: float = 0.0,
    stop_line_active: bool = True,
    d_f: float = math.inf,
    vehicle_ids: Optional[Sequence[int]] = None,
) -> List[HdvPrediction]:
    """Chain the CTH-RV models forward from the leading HDV down to HDV-2.

    ``hdv_states`` and ``params`` are ordered front to back. The leader sees the
    stop line ``stop_margin`` metres early as a stationary obstacle (predecessor
    speed 0); each follower sees its predicted predecessor. Speeds are clamped
    to ``[0, v_max]`` and positions integrated with ``p += v * tau``. The
    speed update is the CTH-RV map of :func:`~cavsafe.hdv_models.cthrv_speed_next`,
    inlined here because it runs ``horizon * k`` times per control step.
    """
    k = len(hdv_states)
    if len(params) != k:
        raise ValueError(f"{k} states but {len(params)} parameter sets")
    P = [[s.p] for s in hdv_states]
    V = [[s.v] for s in hdv_states]
    coef = [(prm.eta * tau, prm.rho, prm.nu * tau) for prm in params]
    v_hi = limits.v_max
    wall = stop_line_pos - stop_margin
    collided = [False] * k
    for n in range(horizon):
        for i in range(k):
            p, v = P[i][n], V[i][n]
            if i == 0:
                d_s = wall - p
                if stop_line_active and d_s <= d_f:
                    dp, v_pred = d_s, 0.0
                else:
                    dp, v_pred = d_f, v
            else:
                dp = P[i - 1][n] - p - l_c
                if dp <= 0.0:
                    collided[i] = True
                if dp <= d_f:
                    v_pred = V[i - 1][n]
                else:
                    dp, v_pred = d_f, v
            eta_t, rho, nu_t = coef[i]
            v_next = v + eta_t * (dp - rho * v) + nu_t * (v_pred - v)
            V[i].append(min(max(v_next, 0.0), v_hi))
            P[i].append(p + v * tau)
    for i in range(1, k):
        if P[i - 1][horizon] - P[i][horizon] - l_c <= 0.0:
            collided[i] = True
    ids = list(vehicle_ids) if vehicle_ids is not None else [None] * k
    out = []
    for i in range(k):
        if collided[i]:
            log.debug("collision predicted behind HDV %s", ids[i - 1])
        out.append(HdvPrediction(np.array(P[i]), np.array(V[i]), ids[i], collided[i]))
    return out


def hdv2_reference_trajectory(predictions: Sequence[HdvPrediction]) -> HdvPrediction:
    """The prediction of the HDV immediately ahead of the CAV (last in front-to-back order)."""
    if not predictions:
        raise EmptyPlatoonError("no HDV precedes the CAV")
    return predictions[-1]
