"""Longitudinal point-mass kinematics, admissible bounds and headway arithmetic.

Positions increase toward the stop line, which sits at ``p_0 = 0`` by default,
so the distance from a vehicle at ``p < 0`` to the line is ``-p``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

# Vehicle length used to convert front-bumper positions into bumper-to-bumper gaps.
VEHICLE_LENGTH = 5.0


class DomainError(ValueError):
    """Raised when an input lies outside the domain of an operation."""


@dataclass(frozen=True)
class VehicleState:
    """Position (m), speed (m/s) and applied acceleration (m/s^2) of one vehicle."""

    p: float
    v: float
    u: float = 0.0


@dataclass(frozen=True)
class Limits:
    u_min: float = -5.0
    u_max: float = 3.0
    v_min: float = 0.0
    v_max: float = 15.0
    tau: float = 0.1

    def __post_init__(self):
        if not self.u_min < 0.0 < self.u_max:
            raise DomainError(f"u_min < 0 < u_max violated: u_min={self.u_min}, u_max={self.u_max}")
        if not 0.0 <= self.v_min < self.v_max:
            raise DomainError(f"0 <= v_min < v_max violated: v_min={self.v_min}, v_max={self.v_max}")
        if not self.tau > 0.0:
            raise DomainError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class GapState:
    """Bumper-to-bumper headway ``e_p`` (m) and approach rate ``e_v`` (m/s)."""

    e_p: float
    e_v: float


@dataclass(frozen=True)
class HeadwayPolicy:
    rho: float = 2.0
    s_0: float = 3.0

    def __post_init__(self):
        if not (self.rho > 0.0 and self.s_0 > 0.0):
            raise DomainError(f"rho and s_0 must be positive, got rho={self.rho}, s_0={self.s_0}")


def step_dynamics(state: VehicleState, u: float, limits: Limits) -> VehicleState:
    """Advance one sample under constant acceleration.

    ``u`` is clamped to ``[u_min, u_max]``; if the resulting speed would leave
    ``[v_min, v_max]`` the acceleration is reduced so the speed lands exactly on
    the bound. The returned state carries the acceleration actually applied.
    """
    if not (math.isfinite(u) and math.isfinite(state.p) and math.isfinite(state.v)):
        raise DomainError(f"non-finite input: p={state.p}, v={state.v}, u={u}")
    tau = limits.tau
    u = min(max(u, limits.u_min), limits.u_max)
    v_next = state.v + u * tau
    if v_next > limits.v_max:
        u = (limits.v_max - state.v) / tau
        v_next = limits.v_max
    elif v_next < limits.v_min:
        u = (limits.v_min - state.v) / tau
        v_next = limits.v_min
    p_next = state.p + state.v * tau + 0.5 * u * tau * tau
    return VehicleState(p_next, v_next, u)


def safe_headway(v: float, policy: HeadwayPolicy) -> float:
    """Speed-dependent minimum gap ``rho * v + s_0``."""
    if v < 0.0:
        raise DomainError(f"speed must be non-negative, got {v}")
    return policy.rho * v + policy.s_0


def gap_states(follower: VehicleState, leader: VehicleState, l_c: float = VEHICLE_LENGTH) -> GapState:
    # negative e_p is returned as-is: it signals bumper contact to the caller
    return GapState(leader.p - follower.p - l_c, leader.v - follower.v)


def is_safe(gap: GapState, follower_v: float, policy: HeadwayPolicy) -> bool:
    return gap.e_p >= safe_headway(follower_v, policy)
