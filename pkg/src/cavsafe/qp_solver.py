"""Dense strictly convex QP solver.

Solves::

    minimize    0.5 x'Hx + f'x
    subject to  A x <= b,  lb <= x <= ub

with the dual active-set method of Goldfarb and Idnani. The method starts from
the unconstrained minimiser (or from a dual-feasible warm-start working set)
and adds the most violated constraint one at a time, dropping constraints
whose multiplier would turn negative. Every iterate is the minimiser of the
problem restricted to its working set, so the objective never decreases.
Finite bounds are handled as extra inequality rows.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

H_REGULARIZATION = 1e-9


class QpError(ValueError):
    """Malformed problem data: wrong shapes, asymmetric or indefinite Hessian."""


@dataclass(eq=False)
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        n = self.f.size
        if self.H.shape != (n, n):
            raise QpError(f"H has shape {self.H.shape}, expected {(n, n)}")
        if not (np.array_equal(self.H, self.H.T) or np.allclose(self.H, self.H.T, rtol=1e-10, atol=1e-12)):
            raise QpError("H is not symmetric")
        if self.A is None:
            self.A = np.zeros((0, n))
            self.b = np.zeros(0)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.A.shape[0] != self.b.size:
            raise QpError(f"A has {self.A.shape[0]} rows but b has {self.b.size} entries")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(-1)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(-1)
        if self.lb.size != n or self.ub.size != n:
            raise QpError("bound vectors must have length n")
        if np.any(self.lb > self.ub):
            raise QpError("lb > ub for some coordinate")

    @property
    def n(self) -> int:
        return self.f.size

    @property
    def m(self) -> int:
        return self.b.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.f @ x)


class KktResiduals(NamedTuple):
    stationarity: float
    primal: float
    complementarity: float

    def max(self) -> float:
        return max(self)


class Multipliers(NamedTuple):
    ineq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass(eq=False)
class QpSolution:
    x: np.ndarray
    objective: float
    status: str
    kkt: KktResiduals
    multipliers: Multipliers
    iterations: int
    active_set: List[int] = field(default_factory=list)
    merit_history: List[float] = field(default_factory=list)
    min_violation: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(problem: QpProblem, x: np.ndarray, multipliers: Multipliers) -> KktResiduals:
    """Max-norm stationarity, primal violation and complementarity residuals.

    Complementarity is the natural residual ``|min(lambda_i, s_i)|`` with
    ``s_i`` the constraint slack: zero exactly when each pair is complementary
    and both sides are non-negative. Unlike ``lambda_i * s_i`` it does not grow
    with the multiplier, which matters when a large penalty weight produces
    multipliers of order 1e6. Negative multipliers therefore count in full.
    """
    lam, mu_lo, mu_up = multipliers
    A, b, lb, ub = problem.A, problem.b, problem.lb, problem.ub
    grad = problem.H @ x + problem.f + A.T @ lam - mu_lo + mu_up
    stat = float(np.max(np.abs(grad))) if grad.size else 0.0

    viol = [0.0]
    if b.size:
        viol.append(float(np.max(A @ x - b)))
    with np.errstate(invalid="ignore"):
        viol.append(float(np.max(np.where(np.isfinite(lb), lb - x, 0.0), initial=0.0)))
        viol.append(float(np.max(np.where(np.isfinite(ub), x - ub, 0.0), initial=0.0)))
    primal = max(viol)

    comp = [0.0]
    for mult, slack in ((lam, b - A @ x), (mu_lo, x - lb), (mu_up, ub - x)):
        if mult.size == 0:
            continue
        finite = np.isfinite(slack)
        if np.any(mult[~finite] != 0.0):
            comp.append(np.inf)
        comp.append(float(np.max(np.abs(np.minimum(mult[finite], slack[finite])), initial=0.0)))
        comp.append(float(np.max(-mult, initial=0.0)))
    return KktResiduals(stat, primal, max(comp))


def _stack_constraints(problem: QpProblem):
    """All constraints as rows ``G x <= h``; returns (G, h, kinds, cols)."""
    n = problem.n
    up = np.flatnonzero(np.isfinite(problem.ub))
    lo = np.flatnonzero(np.isfinite(problem.lb))
    eye = np.eye(n)
    G = np.vstack([problem.A, eye[up], -eye[lo]])
    h = np.concatenate([problem.b, problem.ub[up], -problem.lb[lo]])
    return G, h, up, lo


def _split_multipliers(problem: QpProblem, lam_all: np.ndarray, up, lo) -> Multipliers:
    m, n = problem.m, problem.n
    mu_up = np.zeros(n)
    mu_lo = np.zeros(n)
    mu_up[up] = lam_all[m:m + up.size]
    mu_lo[lo] = lam_all[m + up.size:]
    return Multipliers(lam_all[:m].copy(), mu_lo, mu_up)


_factor_cache: dict = {}


def _factor(H: np.ndarray):
    """Cholesky factor of ``H``, memoised for read-only arrays (which cannot change under us)."""
    if not H.flags.writeable:
        hit = _factor_cache.get(id(H))
        if hit is not None and hit[0] is H:
            return hit[1]
        L = _factor_uncached(H)
        _factor_cache.clear()
        _factor_cache[id(H)] = (H, L)
        return L
    return _factor_uncached(H)


def _factor_uncached(H: np.ndarray):
    try:
        return cho_factor(H, lower=True)
    except LinAlgError:
        pass
    log.info("Hessian factorization failed; adding %.1e diagonal regularization", H_REGULARIZATION)
    try:
        return cho_factor(H + H_REGULARIZATION * np.eye(H.shape[0]), lower=True)
    except LinAlgError as exc:
        raise QpError("H is not positive definite") from exc


class _WorkingSet:
    """Active constraint indices with cached ``H^-1 g_j`` columns and Gram matrix ``M = G_W H^-1 G_W'``."""

    def __init__(self, n: int):
        self.idx: List[int] = []
        self.Z = np.zeros((n, 0))
        self.M = np.zeros((0, 0))
        self.lam = np.zeros(0)

    def __len__(self):
        return len(self.idx)

    def add(self, j: int, z: np.ndarray, m_col: np.ndarray, m_jj: float, lam_j: float):
        k = len(self.idx)
        M = np.empty((k + 1, k + 1))
        M[:k, :k] = self.M
        M[:k, k] = m_col
        M[k, :k] = m_col
        M[k, k] = m_jj
        self.M = M
        self.Z = np.column_stack([self.Z, z])
        self.idx.append(j)
        self.lam = np.append(self.lam, lam_j)

    def drop(self, pos: int):
        del self.idx[pos]
        self.M = np.delete(np.delete(self.M, pos, axis=0), pos, axis=1)
        self.Z = np.delete(self.Z, pos, axis=1)
        self.lam = np.delete(self.lam, pos)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if not self.idx:
            return np.zeros(0)
        return np.linalg.solve(self.M, rhs)


def solve_qp(
    problem: QpProblem,
    tol: float = 1e-6,
    max_iter: int = 4000,
    warm_start: Union[np.ndarray, Sequence[int], None] = None,
) -> QpSolution:
    """Solve ``problem`` to KKT tolerance ``tol``.

    ``warm_start`` is either a primal guess (a length-n array; constraints
    active at it seed the working set) or an explicit list of constraint rows
    in the stacked order ``[A; finite ub; finite lb]``.
    """
    n = problem.n
    G, h, up, lo = _stack_constraints(problem)
    mc = h.size
    L = _factor(problem.H)
    x_unc = -cho_solve(L, problem.f)
    feas_tol = 0.1 * tol

    W = _WorkingSet(n)
    iters = 0
    if warm_start is not None and mc:
        W, iters = _warm_working_set(G, h, L, x_unc, warm_start, tol)
    x = x_unc - W.Z @ W.lam if len(W) else x_unc.copy()

    status = None
    history = [problem.objective(x)]
    min_violation = np.inf
    in_w = np.zeros(mc, dtype=bool)
    in_w[W.idx] = True
    p = None
    while True:
        if p is None:
            viol = G @ x - h
            viol[in_w] = -np.inf
            worst = float(np.max(viol)) if mc else -np.inf
            min_violation = min(min_violation, max(worst, 0.0))
            if worst <= feas_tol:
                status = OPTIMAL
                break
            p = int(np.argmax(viol))
            g_p = G[p]
            z_p = cho_solve(L, g_p)
            gz = float(g_p @ z_p)
            lam_p = 0.0
        if iters >= max_iter:
            status = MAX_ITER
            break
        iters += 1

        m_col = W.Z.T @ g_p if len(W) else np.zeros(0)
        r = W.solve(m_col)
        dx = -(z_p - W.Z @ r) if len(W) else -z_p
        curvature = -float(g_p @ dx)
        independent = curvature > 1e-12 * gz
        c_p = float(g_p @ x - h[p])
        t1 = c_p / curvature if independent else np.inf
        t2, block = np.inf, -1
        neg = np.flatnonzero(r > 0.0)  # d(lam_W) = -r
        if neg.size:
            ratios = W.lam[neg] / r[neg]
            k = int(np.argmin(ratios))
            t2, block = float(ratios[k]), int(neg[k])
        if not np.isfinite(t1) and not np.isfinite(t2):
            status = INFEASIBLE
            break
        t = min(t1, t2)
        if independent:
            x = x + t * dx
        W.lam = np.maximum(W.lam - t * r, 0.0)
        lam_p += t
        if t2 < t1:
            in_w[W.idx[block]] = False
            W.drop(block)
        else:
            W.add(p, z_p, m_col, gz, lam_p)
            in_w[p] = True
            p = None
        history.append(problem.objective(x))

    if status == OPTIMAL and len(W):
        x = _polish(problem, G, h, x_unc, W, x)
    lam_all = np.zeros(mc)
    lam_all[W.idx] = W.lam
    mult = _split_multipliers(problem, lam_all, up, lo)
    kkt = kkt_residuals(problem, x, mult)
    if status == OPTIMAL and kkt.max() > tol:
        log.warning("QP terminated with KKT residuals %s above tolerance %.1e", kkt, tol)
        status = MAX_ITER
    if status != INFEASIBLE:
        min_violation = kkt.primal
    return QpSolution(
        x=x,
        objective=problem.objective(x),
        status=status,
        kkt=kkt,
        multipliers=mult,
        iterations=iters,
        active_set=list(W.idx),
        merit_history=history,
        min_violation=float(min_violation),
    )


def _polish(problem, G, h, x_unc, W: _WorkingSet, x_iter):
    """Recompute the multipliers of the final working set in one solve.

    The iterates accumulate rounding from many small steps; the equality
    problem on ``W`` gives the same point directly. Kept only if the
    recomputed multipliers are still non-negative.
    """
    M = W.M
    G_W, h_W = G[W.idx], h[W.idx]
    d = 1.0 / np.sqrt(np.diag(M))
    Ms = M * np.outer(d, d)
    try:
        lam = d * np.linalg.solve(Ms, d * (G_W @ x_unc - h_W))
        x = x_unc - W.Z @ lam
        # one round of iterative refinement pulls the active rows back onto their bounds
        lam = lam + d * np.linalg.solve(Ms, d * (G_W @ x - h_W))
    except np.linalg.LinAlgError:
        return x_iter
    if np.any(lam < -1e-9 * max(1.0, np.max(np.abs(lam)))):
        return x_iter
    W.lam = np.maximum(lam, 0.0)
    return x_unc - W.Z @ W.lam


def _warm_working_set(G, h, L, x_unc, warm_start, tol):
    """Build a dual-feasible working set from a warm-start guess.

    Candidates are thinned to a linearly independent subset, then every
    constraint with a negative multiplier is removed until none is left.
    """
    n = G.shape[1]
    mc = h.size
    guess = np.asarray(warm_start)
    if guess.dtype.kind == "f" and guess.shape == (n,):
        resid = G @ guess - h
        cand = np.flatnonzero(np.abs(resid) <= 1e-9 * (1.0 + np.abs(h)))
    else:
        cand = np.unique(guess.astype(int))
        cand = cand[(cand >= 0) & (cand < mc)]
    W = _WorkingSet(n)
    if cand.size == 0:
        return W, 0
    Gc = G[cand]
    Zc = cho_solve(L, Gc.T)
    Mc = Gc @ Zc
    k = cand.size
    keep: List[int] = []
    rhs = Gc @ x_unc - h[cand]
    try:
        Lfull = np.linalg.cholesky(Mc)
        if np.min(np.diag(Lfull) ** 2 / np.diag(Mc)) > 1e-10:
            keep = list(range(k))
            lam = cho_solve((Lfull, True), rhs, check_finite=False)
            if np.all(lam >= 0.0):
                # common case: the whole guess is independent and dual feasible
                W.idx = [int(j) for j in cand]
                W.Z, W.M, W.lam = Zc, Mc, lam
                return W, 0
    except np.linalg.LinAlgError:
        pass
    Lm = np.zeros((k, k))
    for i in range(k if not keep else 0):
        r = len(keep)
        if r:
            l = solve_triangular(Lm[:r, :r], Mc[keep, i], lower=True, check_finite=False)
            d = Mc[i, i] - l @ l
        else:
            d = Mc[i, i]
        if d <= 1e-10 * Mc[i, i]:
            continue
        if r:
            Lm[r, :r] = l
        Lm[r, r] = np.sqrt(d)
        keep.append(i)
    sel = np.array(keep, dtype=int)
    rounds = 0
    lam = np.zeros(0)
    M = np.zeros((0, 0))
    while sel.size:
        M = Mc[np.ix_(sel, sel)]
        lam = np.linalg.solve(M, rhs[sel])
        neg = lam < 0.0
        if not neg.any():
            break
        sel = sel[~neg]
        rounds += 1
    if sel.size:
        W.idx = [int(j) for j in cand[sel]]
        W.Z = Zc[:, sel]
        W.M = M
        W.lam = lam
    return W, rounds


def dump_problem(problem: QpProblem, path: Union[str, Path]) -> None:
    """Write the problem data as labelled plain-text matrices."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for name in ("H", "f", "A", "b", "lb", "ub"):
            arr = np.atleast_2d(getattr(problem, name))
            fh.write(f"# {name} {arr.shape[0]} {arr.shape[1]}\n")
            np.savetxt(fh, arr, fmt="%.17g")
