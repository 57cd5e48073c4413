"""Independent reference computations used by the test-suite.

Nothing here imports the code paths it is used to check.
"""
from __future__ import annotations

import numpy as np


def random_feasible_qp(rng: np.random.Generator, n: int, m: int, cond: float = 1e2):
    """Strictly convex QP with a known interior-ish feasible point.

    Returns (H, f, A, b, lb, ub). About a third of the inequality rows pass
    through the generating point so the optimum has a non-trivial active set.
    """
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.logspace(0.0, np.log10(cond), n)
    H = (Q * eig) @ Q.T
    H = 0.5 * (H + H.T)
    x0 = rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    slack = rng.uniform(0.0, 1.0, m)
    slack[rng.random(m) < 0.33] = 0.0
    b = A @ x0 + slack
    lb = x0 - rng.uniform(0.5, 2.0, n)
    ub = x0 + rng.uniform(0.5, 2.0, n)
    f = -H @ (x0 + 3.0 * rng.standard_normal(n))
    return H, f, A, b, lb, ub


def dual_projected_gradient(H, f, A, b, lb, ub, max_iter=1_000_000, tol=1e-13):
    """Minimise 0.5 x'Hx + f'x s.t. Ax <= b, lb <= x <= ub by projected gradient on the dual.

    The dual of a strictly convex QP is a smooth problem over the
    non-negative orthant, so projection is a clip at zero. Accelerated
    (FISTA) steps with gradient-based restarts. Returns (x, objective, iterations).
    """
    n = f.size
    fin_u = np.isfinite(ub)
    fin_l = np.isfinite(lb)
    G = np.vstack([A, np.eye(n)[fin_u], -np.eye(n)[fin_l]])
    h = np.concatenate([b, ub[fin_u], -lb[fin_l]])
    Hinv = np.linalg.inv(H)
    Hinv = 0.5 * (Hinv + Hinv.T)
    Q = G @ Hinv @ G.T
    c = G @ Hinv @ f + h
    step = 1.0 / np.linalg.eigvalsh(Q)[-1]
    lam = np.zeros(h.size)
    y = lam.copy()
    t = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        grad = Q @ y + c
        lam_new = np.maximum(y - step * grad, 0.0)
        if grad @ (lam_new - lam) > 0.0:  # restart momentum
            t = 1.0
            y = lam.copy()
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = lam_new + ((t - 1.0) / t_new) * (lam_new - lam)
        change = np.max(np.abs(lam_new - lam))
        lam, t = lam_new, t_new
        if change <= tol * max(1.0, np.max(np.abs(lam))):
            break
    x = -Hinv @ (f + G.T @ lam)
    return x, float(0.5 * x @ H @ x + f @ x), it


def brute_force_min(fun, grids):
    """Exhaustive minimum of ``fun`` over the Cartesian product of 1-D ``grids``."""
    mesh = np.meshgrid(*grids, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = np.array([fun(p) for p in pts])
    k = int(np.argmin(vals))
    return pts[k], float(vals[k])


def batch_least_squares(gamma0, P0, Phi, y):
    """Prior-regularised normal equations: argmin |Phi g - y|^2 + (g-gamma0)' P0^-1 (g-gamma0)."""
    P0inv = np.linalg.inv(P0)
    lhs = P0inv + Phi.T @ Phi
    rhs = P0inv @ gamma0 + Phi.T @ y
    return np.linalg.solve(lhs, rhs)
