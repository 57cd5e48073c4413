"""Online identification of CTH-RV parameters by recursive least squares.

The CTH-RV speed map is linear in the regressor ``phi = [v, delta_p, v_pred]``::

    v(t+1) = gamma_1 * v(t) + gamma_2 * delta_p(t) + gamma_3 * v_pred(t)

with ``gamma_1 = 1 - (eta*rho + nu)*tau``, ``gamma_2 = eta*tau`` and
``gamma_3 = nu*tau``. One :class:`RlsState` is kept per human-driven vehicle.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .hdv_models import CthRvParams
from .vehicle_core import DomainError

log = logging.getLogger(__name__)

GAMMA_EPS = 1e-6


class DegenerateEstimateError(ValueError):
    """The parameter vector cannot be mapped back to valid CTH-RV parameters."""


@dataclass(frozen=True, eq=False)
class RlsState:
    gamma_hat: np.ndarray
    P: np.ndarray
    xi: float = 1.0


@dataclass(frozen=True)
class EstimatorConfig:
    gamma0: Tuple[float, float, float] = (0.67, 0.1, 0.18)
    p0: float = 0.01
    xi: float = 1.0

    def __post_init__(self):
        if len(self.gamma0) != 3:
            raise DomainError(f"gamma0 must have 3 entries, got {self.gamma0}")
        if not self.p0 > 0.0:
            raise DomainError(f"p0 must be positive, got {self.p0}")
        if not 0.0 < self.xi <= 1.0:
            raise DomainError(f"xi must lie in (0, 1], got {self.xi}")


def initial_rls_state(config: Optional[EstimatorConfig] = None) -> RlsState:
    config = config or EstimatorConfig()
    return RlsState(np.array(config.gamma0, dtype=float), config.p0 * np.eye(3), config.xi)


def make_regressor(v: float, delta_p: float, v_pred: float) -> np.ndarray:
    phi = np.array([v, delta_p, v_pred], dtype=float)
    if not np.all(np.isfinite(phi)):
        raise DomainError(f"non-finite regressor {phi}")
    return phi


def rls_update(
    state: RlsState,
    phi: np.ndarray,
    v_measured_next: float,
    reset_state: Optional[RlsState] = None,
) -> Tuple[RlsState, float]:
    """One recursive least squares step with forgetting factor ``state.xi``.

    Returns the updated state and the a-priori residual ``v_measured_next - gamma_hat^T phi``.
    If the updated covariance is no longer positive definite the estimator is
    reset to ``reset_state`` (default: :func:`initial_rls_state`).
    """
    P, xi = state.P, state.xi
    v_hat = float(state.gamma_hat @ phi)
    residual = v_measured_next - v_hat
    P_phi = P @ phi
    denom = xi + float(phi @ P_phi)
    gain = P_phi / denom
    gamma = state.gamma_hat + gain * residual
    P_next = (P - np.outer(P_phi, P_phi) / denom) / xi
    P_next = 0.5 * (P_next + P_next.T)
    if not _is_positive_definite(P_next):
        log.warning("RLS covariance lost positive definiteness; resetting estimator")
        return (reset_state or initial_rls_state()), residual
    return RlsState(gamma, P_next, xi), residual


def _is_positive_definite(P: np.ndarray) -> bool:
    """Sylvester's criterion for a symmetric 3x3 matrix (cheaper than a factorization here)."""
    a, b, c = P[0, 0], P[0, 1], P[0, 2]
    d, e, f = P[1, 1], P[1, 2], P[2, 2]
    m2 = a * d - b * b
    det = a * (d * f - e * e) - b * (b * f - e * c) + c * (b * e - d * c)
    return bool(a > 0.0 and m2 > 0.0 and det > 0.0)


def cthrv_to_gamma(params: CthRvParams, tau: float) -> np.ndarray:
    return np.array([
        1.0 - (params.eta * params.rho + params.nu) * tau,
        params.eta * tau,
        params.nu * tau,
    ])


def gamma_to_cthrv(gamma: Sequence[float], tau: float, eps: float = GAMMA_EPS) -> CthRvParams:
    """Invert the regression parameters into ``(eta, nu, rho)``.

    Raises :class:`DegenerateEstimateError` when ``|gamma_2| <= eps`` or when the
    inverted parameters fall outside the model's admissible region.
    """
    g1, g2, g3 = (float(g) for g in gamma)
    if not all(math.isfinite(g) for g in (g1, g2, g3)) or abs(g2) <= eps:
        raise DegenerateEstimateError(f"gamma_2 too close to zero: {gamma}")
    try:
        return CthRvParams(eta=g2 / tau, nu=g3 / tau, rho=(1.0 - g1 - g3) / g2)
    except DomainError as exc:
        raise DegenerateEstimateError(str(exc)) from exc
