"""Convex QP solver with an implicit-differentiation backward pass.

Objective convention: the public problem is ``min c^T Q c + q^T c``.  Internally
we work with ``P = Q + Q^T`` so stationarity reads

    P c + q + A^T nu + G^T lam = 0,

and the dual values reported here follow that convention (``nu = -2`` for
``min |c|^2 s.t. c_1 = 1``).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from numpy.typing import NDArray

from .errors import ArgumentError, DegenerateGradientError
from .minsnap_qp import QpProblem

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

STRICT_MARGIN = 1e-7
KKT_REG = 1e-9
RCOND_MIN = 1e-14


@dataclass
class QpSolution:
    c: NDArray[np.float64]
    nu: NDArray[np.float64]
    lam: NDArray[np.float64]
    objective: float
    iterations: int
    status: str
    slack: NDArray[np.float64] = field(repr=False)
    active: NDArray[np.bool_] = field(repr=False)
    _factors: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def margin(self) -> float:
        """Strict-complementarity margin min_i max(lam_i, slack_i); inf without inequalities."""
        if self.lam.size == 0:
            return float("inf")
        return float(np.min(np.maximum(self.lam, self.slack)))


@dataclass(frozen=True)
class ProblemGradients:
    """Gradient of a scalar loss with respect to every QP data array."""

    Q: NDArray[np.float64]
    q: NDArray[np.float64]
    A: NDArray[np.float64]
    b: NDArray[np.float64]
    G: NDArray[np.float64]
    h: NDArray[np.float64]
    degenerate: bool = False
    degenerate_index: int | None = None


class _Kkt:
    """LU factorization of a symmetrically equilibrated KKT matrix.

    ``K`` is scaled to ``S K S`` (Ruiz, symmetric).  When the scaled matrix is
    numerically singular (reciprocal condition below ``RCOND_MIN``) a second
    factorization is made with ``+reg`` on the first ``n_primal`` diagonal
    entries and ``-reg`` on the rest.  Each solve refines against the unshifted
    matrix and keeps whichever candidate leaves the smaller residual.
    """

    def __init__(self, K: NDArray[np.float64], n_primal: int, reg: float = KKT_REG, refine: int = 30, n_scale: int = 10):
        self.K = K
        S = np.ones(K.shape[0])
        for _ in range(n_scale):
            r = np.max(np.abs(S[:, None] * K * S), axis=1, initial=0.0)
            S /= np.sqrt(np.where(r > 0, r, 1.0))
        self.S = S
        self.Ks = S[:, None] * K * S
        self.refine = refine
        self._Kx = None
        self.factors = []
        lu, rcond = self._factor(self.Ks)
        if lu is not None:
            self.factors.append(lu)
        if rcond < RCOND_MIN and K.shape[0]:
            shift = np.where(np.arange(K.shape[0]) < n_primal, reg, -reg)
            lu_reg, _ = self._factor(self.Ks + np.diag(shift))
            if lu_reg is not None:
                self.factors.append(lu_reg)

    @staticmethod
    def _factor(M):
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            try:
                lu = sla.lu_factor(M, check_finite=False)
            except (sla.LinAlgWarning, np.linalg.LinAlgError, ValueError):
                return None, 0.0
        if not np.all(np.isfinite(lu[0])):
            return None, 0.0
        rcond, info = sla.lapack.dgecon(lu[0], np.max(np.sum(np.abs(M), axis=0), initial=0.0), norm="1")
        return lu, float(rcond) if info == 0 else 0.0

    @property
    def singular(self) -> bool:
        return not self.factors

    def _refined(self, lu, r):
        """LU solve refined with the iterate and residual carried in extended precision."""
        if self._Kx is None:
            self._Kx = self.Ks.astype(np.longdouble)
        rx = r.astype(np.longdouble)
        y = sla.lu_solve(lu, r, check_finite=False).astype(np.longdouble)
        res = rx - self._Kx @ y
        norm = np.max(np.abs(res), initial=0.0)
        floor = np.finfo(np.longdouble).eps * max(np.max(np.abs(r), initial=0.0), 1e-300)
        for _ in range(self.refine):
            if norm <= floor:
                break
            y_new = y + sla.lu_solve(lu, res.astype(np.float64), check_finite=False)
            res_new = rx - self._Kx @ y_new
            norm_new = np.max(np.abs(res_new), initial=0.0)
            if not norm_new < norm:
                break
            y, res, norm = y_new, res_new, norm_new
        return y.astype(np.float64), float(norm)

    def solve(self, rhs: NDArray[np.float64]) -> NDArray[np.float64]:
        r = self.S * rhs
        if not self.factors:
            return self.S * np.linalg.lstsq(self.Ks, r, rcond=None)[0]
        best, best_norm = None, np.inf
        for lu in self.factors:
            y, norm = self._refined(lu, r)
            if best is None or norm < best_norm:
                best, best_norm = y, norm
        return self.S * best


def _eq_kkt(P, A, extra=None) -> _Kkt:
    rows = [A] if extra is None else [A, extra]
    C = np.vstack(rows) if rows else np.zeros((0, P.shape[0]))
    k = C.shape[0]
    K = np.block([[P, C.T], [C, np.zeros((k, k))]])
    return _Kkt(K, P.shape[0])


def _ruiz(P, A, G, n_iter: int = 15):
    """Diagonal equilibration of the KKT matrix; returns variable, equality-row and inequality-row scales."""
    d, p, m = P.shape[0], A.shape[0], G.shape[0]
    D, Ea, Eg = np.ones(d), np.ones(p), np.ones(m)
    for _ in range(n_iter):
        Ps = D[:, None] * P * D
        As = Ea[:, None] * A * D
        Gs = Eg[:, None] * G * D
        col = np.max(np.abs(Ps), axis=0, initial=0.0)
        if p:
            col = np.maximum(col, np.max(np.abs(As), axis=0))
        if m:
            col = np.maximum(col, np.max(np.abs(Gs), axis=0))
        ra = np.max(np.abs(As), axis=1, initial=0.0)
        rg = np.max(np.abs(Gs), axis=1, initial=0.0)
        D /= np.sqrt(np.where(col > 0, col, 1.0))
        Ea /= np.sqrt(np.where(ra > 0, ra, 1.0))
        Eg /= np.sqrt(np.where(rg > 0, rg, 1.0))
    return D, Ea, Eg


def _max_step(v, dv) -> float:
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _ipm(P, q, A, b, G, h, tol, max_iter):
    d, p, m = P.shape[0], A.shape[0], G.shape[0]
    K0 = np.block(
        [
            [P, A.T, G.T],
            [A, np.zeros((p, p)), np.zeros((p, m))],
            [G, np.zeros((m, p)), -np.eye(m)],
        ]
    )
    sol = _Kkt(K0, d).solve(np.concatenate([-q, b, h]))
    x, y, z = sol[:d], sol[d : d + p], sol[d + p :]
    s = -z.copy()
    shift = -np.min(s)
    if shift >= 0:
        s += 1.0 + shift
    shift = -np.min(z)
    if shift >= 0:
        z = z + 1.0 + shift

    scale_d = 1.0 + max(np.max(np.abs(q), initial=0.0), np.max(np.abs(P), initial=0.0))
    scale_p = 1.0 + np.max(np.abs(b), initial=0.0)
    scale_i = 1.0 + np.max(np.abs(h), initial=0.0)
    it = 0
    status = MAX_ITER
    best, best_merit, stall = (x, y, z, s), np.inf, 0
    for it in range(1, max_iter + 1):
        rd = P @ x + q + A.T @ y + G.T @ z
        rp = A @ x - b
        ri = G @ x + s - h
        mu = float(s @ z) / m
        merit = max(
            np.max(np.abs(rd)) / scale_d,
            np.max(np.abs(rp), initial=0.0) / scale_p,
            np.max(np.abs(ri)) / scale_i,
            mu,
        )
        if merit <= tol:
            status = OPTIMAL
            best = (x, y, z, s)
            break
        # the reduced system degrades as z / s spreads; keep the best iterate and stop on stall
        if merit < best_merit:
            best, best_merit, stall = (x, y, z, s), merit, 0
        else:
            stall += 1
            if stall >= 10 and best_merit < 1e-4:
                break
        if not (np.all(np.isfinite(x)) and np.max(np.abs(x)) < 1e14 and np.max(z) < 1e14):
            status = INFEASIBLE
            break
        K = np.block(
            [
                [P, A.T, G.T],
                [A, np.zeros((p, p)), np.zeros((p, m))],
                [G, np.zeros((m, p)), -np.diag(s / z)],
            ]
        )
        kkt = _Kkt(K, d)

        def newton(rc):
            sol = kkt.solve(np.concatenate([-rd, -rp, -ri + rc / z]))
            dx, dy, dz = sol[:d], sol[d : d + p], sol[d + p :]
            ds = -(rc + s * dz) / z
            return dx, dy, dz, ds

        dx, dy, dz, ds = newton(s * z)
        a_aff = min(1.0, _max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dy, dz, ds = newton(s * z + ds * dz - sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        x, y, z, s = x + alpha * dx, y + alpha * dy, z + alpha * dz, s + alpha * ds
    x, y, z, s = best
    return x, y, z, s, it, status


def _polish(P, q, A, b, G, h, x, z, s, rounds: int = 8):
    """Re-solve with the identified active set held at equality; None if no KKT point is reached.

    Starting from ``z > s``, rows with negative multipliers are released and
    violated rows are added until the equality-constrained solve is a KKT point.
    """
    d, p = P.shape[0], A.shape[0]
    feas_tol = 1e-11 * (1.0 + np.max(np.abs(h), initial=0.0))
    active = z > s
    seen = set()
    for _ in range(rounds):
        key = active.tobytes()
        if key in seen:
            return None
        seen.add(key)
        kkt = _eq_kkt(P, A, G[active])
        sol = kkt.solve(np.concatenate([-q, b, h[active]]))
        if not np.all(np.isfinite(sol)):
            return None
        c, nu, lam_a = sol[:d], sol[d : d + p], sol[d + p :]
        slack = h - G @ c
        neg = lam_a < -1e-9 * (1.0 + np.max(np.abs(lam_a), initial=0.0))
        viol = (slack < -feas_tol) & ~active
        if not np.any(neg) and not np.any(viol):
            lam = np.zeros(G.shape[0])
            lam[active] = lam_a
            return c, nu, lam, active, kkt
        idx = np.flatnonzero(active)
        active = active.copy()
        active[idx[neg]] = False
        active |= viol
    return None


def _solve_dense(Q, q, A, b, G, h, tol, max_iter):
    P = Q + Q.T
    d, m = P.shape[0], G.shape[0]
    if m == 0:
        kkt = _eq_kkt(P, A)
        sol = kkt.solve(np.concatenate([-q, b]))
        c, nu = sol[:d], sol[d:]
        # norm-wise backward error: residual against the magnitude of the terms it sums
        feasible = bool(np.all(np.abs(A @ c - b) <= 1e-9 * (1.0 + np.abs(A) @ np.abs(c) + np.abs(b))))
        status = OPTIMAL if feasible and np.all(np.isfinite(c)) else INFEASIBLE
        empty = np.zeros(0)
        return c, nu, empty, empty, np.zeros(0, dtype=bool), 1, status, kkt
    D, Ea, Eg = _ruiz(P, A, G)
    x, y, z, s, it, status = _ipm(
        D[:, None] * P * D, D * q, Ea[:, None] * A * D, Ea * b, Eg[:, None] * G * D, Eg * h, tol, max_iter
    )
    x, y, z, s = D * x, Ea * y, Eg * z, s / Eg
    if status != INFEASIBLE:
        polished = _polish(P, q, A, b, G, h, x, z, s)
        if polished is not None:
            c, nu, lam, active, kkt = polished
            return c, nu, lam, np.maximum(h - G @ c, 0.0) * ~active, active, it, OPTIMAL, kkt
        if status == OPTIMAL:
            log.debug("active-set polish rejected; keeping interior-point iterate")
    if status == MAX_ITER and np.max(np.abs(A @ x - b), initial=0.0) > 1e-6 * (1.0 + np.max(np.abs(b), initial=0.0)):
        status = INFEASIBLE
    return x, y, z, np.maximum(h - G @ x, 0.0), z > s, it, status, None


def _block_views(problem: QpProblem):
    """Per-axis sub-problems when the block metadata is consistent, else a single dense view."""
    d = problem.n_vars
    blocks = problem.blocks
    if blocks:
        cover = np.concatenate([blk.variables for blk in blocks])
        rows = np.concatenate([blk.eq_rows for blk in blocks])
        irows = np.concatenate([blk.ineq_rows for blk in blocks])
        if (
            np.array_equal(np.sort(cover), np.arange(d))
            and np.array_equal(np.sort(rows), np.arange(problem.n_eq))
            and np.array_equal(np.sort(irows), np.arange(problem.n_ineq))
        ):
            return [(blk.variables, blk.eq_rows, blk.ineq_rows) for blk in blocks]
    return [(np.arange(d), np.arange(problem.n_eq), np.arange(problem.n_ineq))]


def solve(problem: QpProblem, tol: float = 1e-9, max_iter: int = 100) -> QpSolution:
    """Solve ``problem``; decoupled axis blocks are solved independently."""
    d, p, m = problem.n_vars, problem.n_eq, problem.n_ineq
    c = np.zeros(d)
    nu = np.zeros(p)
    lam = np.zeros(m)
    slack = np.zeros(m)
    active = np.zeros(m, dtype=bool)
    iterations = 0
    statuses = []
    factors = {}
    for k, (vi, ei, ii) in enumerate(_block_views(problem)):
        Q = problem.Q[np.ix_(vi, vi)]
        A = problem.A[np.ix_(ei, vi)]
        G = problem.G[np.ix_(ii, vi)]
        ck, nuk, lamk, slk, actk, it, st, kkt = _solve_dense(
            Q, problem.q[vi], A, problem.b[ei], G, problem.h[ii], tol, max_iter
        )
        c[vi], nu[ei], lam[ii], slack[ii], active[ii] = ck, nuk, lamk, slk, actk
        iterations = max(iterations, it)
        statuses.append(st)
        factors[k] = kkt
    if INFEASIBLE in statuses:
        status = INFEASIBLE
    elif MAX_ITER in statuses:
        status = MAX_ITER
    else:
        status = OPTIMAL
    return QpSolution(
        c=c,
        nu=nu,
        lam=lam,
        objective=problem.objective(c),
        iterations=iterations,
        status=status,
        slack=slack,
        active=active,
        _factors=factors,
    )


def kkt_residuals(problem: QpProblem, solution: QpSolution) -> dict[str, float]:
    c, nu, lam = solution.c, solution.nu, solution.lam
    P = problem.Q + problem.Q.T
    stat = P @ c + problem.q + problem.A.T @ nu + problem.G.T @ lam
    gap = problem.G @ c - problem.h
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "equality": float(np.max(np.abs(problem.A @ c - problem.b), initial=0.0)),
        "inequality": float(np.max(gap, initial=0.0)) if gap.size else 0.0,
        "complementarity": float(np.max(np.abs(lam * gap), initial=0.0)),
        "dual_feasibility": float(max(0.0, -np.min(lam, initial=0.0))),
    }


def kkt_satisfied(problem: QpProblem, solution: QpSolution, tol: float = 1e-8) -> bool:
    r = kkt_residuals(problem, solution)
    scale = 1.0 + np.max(np.abs(solution.c), initial=0.0)
    return (
        r["stationarity"] <= tol * scale
        and r["equality"] <= tol
        and r["inequality"] <= tol
        and r["complementarity"] <= tol
        and r["dual_feasibility"] <= tol
    )


def _backward_block(P, A, G, h, c, nu, lam, slack, active, g, kkt, strict):
    d, p, m = P.shape[0], A.shape[0], G.shape[0]
    degenerate = False
    bad = None
    if m:
        margins = np.maximum(lam, slack)
        bad = int(np.argmin(margins))
        degenerate = margins[bad] <= STRICT_MARGIN
        if degenerate and strict:
            raise DegenerateGradientError(bad, float(margins[bad]))
    if not degenerate:
        if kkt is None:
            kkt = _eq_kkt(P, A, G[active])
        y = kkt.solve(np.concatenate([g, np.zeros(kkt.K.shape[0] - d)]))
        yc, ynu, w = y[:d], y[d : d + p], y[d + p :]
        wh = np.zeros(m)
        wh[active] = w
    else:
        gap = G @ c - h
        M = np.block(
            [
                [P, A.T, G.T],
                [A, np.zeros((p, p)), np.zeros((p, m))],
                [lam[:, None] * G, np.zeros((m, p)), np.diag(gap)],
            ]
        )
        y = np.linalg.lstsq(M.T, np.concatenate([g, np.zeros(p + m)]), rcond=None)[0]
        yc, ynu = y[:d], y[d : d + p]
        wh = lam * y[d + p :]
    gQ = -(np.outer(yc, c) + np.outer(c, yc))
    gA = -(np.outer(nu, yc) + np.outer(ynu, c))
    gG = -(np.outer(lam, yc) + np.outer(wh, c))
    return gQ, -yc, gA, ynu, gG, wh, degenerate, (bad if degenerate else None)


def backward(problem: QpProblem, solution: QpSolution, grad_c, strict: bool = False) -> ProblemGradients:
    """Pull ``dL/dc*`` back to gradients on (Q, q, A, b, G, h) via the differentiated KKT system.

    Inactive inequalities receive exactly zero gradient in ``h``.  With weak
    complementarity the gradient comes from a least-squares solve and is
    flagged; ``strict=True`` raises :class:`DegenerateGradientError` instead.
    """
    if solution.status != OPTIMAL:
        raise ArgumentError(f"backward needs an optimal solution, got status {solution.status!r}")
    g = np.asarray(grad_c, dtype=np.float64).reshape(-1)
    d, p, m = problem.n_vars, problem.n_eq, problem.n_ineq
    if g.size != d:
        raise ArgumentError("grad_c has the wrong length")
    gQ, gq, gA, gb = np.zeros((d, d)), np.zeros(d), np.zeros((p, d)), np.zeros(p)
    gG, gh = np.zeros((m, d)), np.zeros(m)
    degenerate = False
    bad_index = None
    for k, (vi, ei, ii) in enumerate(_block_views(problem)):
        Qb = problem.Q[np.ix_(vi, vi)]
        res = _backward_block(
            Qb + Qb.T,
            problem.A[np.ix_(ei, vi)],
            problem.G[np.ix_(ii, vi)],
            problem.h[ii],
            solution.c[vi],
            solution.nu[ei],
            solution.lam[ii],
            solution.slack[ii],
            solution.active[ii],
            g[vi],
            solution._factors.get(k),
            strict,
        )
        bQ, bq, bA, bb, bG, bh, bdeg, bbad = res
        gQ[np.ix_(vi, vi)] = bQ
        gq[vi] = bq
        gA[np.ix_(ei, vi)] = bA
        gb[ei] = bb
        gG[np.ix_(ii, vi)] = bG
        gh[ii] = bh
        if bdeg and not degenerate:
            degenerate, bad_index = True, int(ii[bbad])
    return ProblemGradients(gQ, gq, gA, gb, gG, gh, degenerate, bad_index)
