"""Assembly of the minimum-snap trajectory problem as a quadratic program.

The decision vector stacks monomial coefficients segment-major, then axis,
then power: ``c[((seg * n_axes) + axis) * (m + 1) + k]``.  Every equality row
touches a single axis, so without corridors (or with ``timed`` corridors) the
problem decouples into one block per axis; :class:`AxisBlock` records that
structure for the solver.  Perpendicular corridors couple the position axes of
a segment and are solved as one dense problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ArgumentError
from .piecewise_poly import (
    DEFAULT_DEGREE,
    PiecewisePolynomial,
    basis_row,
    basis_row_dt,
    gram,
    gram_dtau,
)

AXIS_NAMES = {"x": 0, "y": 1, "z": 2}
K_CONT = 3  # position continuity through jerk
K_CONT_YAW = 1


@dataclass(frozen=True)
class KeypointPath:
    points: NDArray[np.float64]
    yaw: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise ArgumentError("key-point path needs shape [n >= 2, 3]")
        if not np.all(np.isfinite(pts)):
            raise ArgumentError("key points must be finite")
        object.__setattr__(self, "points", pts)
        if self.yaw is not None:
            yaw = np.array(self.yaw, dtype=np.float64).reshape(-1)
            if yaw.size != pts.shape[0]:
                raise ArgumentError("yaw must have one entry per key point")
            object.__setattr__(self, "yaw", yaw)

    @property
    def n_keypoints(self) -> int:
        return self.points.shape[0]

    @property
    def n_segments(self) -> int:
        return self.points.shape[0] - 1

    @property
    def chord_lengths(self) -> NDArray[np.float64]:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)


@dataclass(frozen=True)
class BoundaryConditions:
    """Velocity, acceleration and jerk (rows) at start and end; zero means rest-to-rest."""

    start_derivs: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    end_derivs: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    start_yaw_rate: float = 0.0
    end_yaw_rate: float = 0.0

    def __post_init__(self) -> None:
        for name in ("start_derivs", "end_derivs"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != (3, 3) or not np.all(np.isfinite(arr)):
                raise ArgumentError(f"{name} must be a finite 3x3 array")
            object.__setattr__(self, name, arr)
        if not (np.isfinite(self.start_yaw_rate) and np.isfinite(self.end_yaw_rate)):
            raise ArgumentError("yaw rates must be finite")


@dataclass(frozen=True)
class CorridorSpec:
    """Box bounds on the deviation of r(t_s) from each segment's chord.

    ``mode="perpendicular"`` bounds the components of (I - u u^T)(r(t_s) - xi_i),
    the offset from the chord line, so progress along the chord is free.
    ``mode="timed"`` bounds r_a(t_s) - line_a(t_s) against the chord point at the
    same time fraction; it keeps the axes decoupled but is infeasible for tight
    widths whenever the motion must start or stop at rest.
    """

    half_width: float
    samples_per_segment: int = 8
    axes: tuple[str, ...] = ("x", "y", "z")
    mode: str = "perpendicular"

    def __post_init__(self) -> None:
        if self.mode not in ("perpendicular", "timed"):
            raise ArgumentError(f"unknown corridor mode {self.mode!r}")
        if not self.half_width > 0:
            raise ArgumentError("corridor half width must be positive")
        if self.samples_per_segment < 1:
            raise ArgumentError("samples_per_segment must be >= 1")
        if not self.axes or any(a not in AXIS_NAMES for a in self.axes):
            raise ArgumentError(f"corridor axes must be a non-empty subset of x, y, z: {self.axes}")

    def fractions(self) -> NDArray[np.float64]:
        s = self.samples_per_segment
        return np.arange(1, s + 1) / (s + 1)


@dataclass(frozen=True)
class AxisBlock:
    axis: int
    variables: NDArray[np.int64]
    eq_rows: NDArray[np.int64]
    ineq_rows: NDArray[np.int64]


@dataclass(frozen=True)
class QpProblem:
    """min c^T Q c + q^T c  s.t.  A c = b,  G c <= h."""

    Q: NDArray[np.float64]
    A: NDArray[np.float64]
    b: NDArray[np.float64]
    G: NDArray[np.float64] | None = None
    h: NDArray[np.float64] | None = None
    q: NDArray[np.float64] | None = None
    blocks: tuple[AxisBlock, ...] | None = None
    source: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        Q = np.asarray(self.Q, dtype=np.float64)
        d = Q.shape[0]
        if Q.shape != (d, d):
            raise ArgumentError("Q must be square")
        A = np.asarray(self.A, dtype=np.float64).reshape(-1, d)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if A.shape[0] != b.size:
            raise ArgumentError("A and b row counts differ")
        G = np.zeros((0, d)) if self.G is None else np.asarray(self.G, dtype=np.float64).reshape(-1, d)
        h = np.zeros(0) if self.h is None else np.asarray(self.h, dtype=np.float64).reshape(-1)
        if G.shape[0] != h.size:
            raise ArgumentError("G and h row counts differ")
        q = np.zeros(d) if self.q is None else np.asarray(self.q, dtype=np.float64).reshape(-1)
        if q.size != d:
            raise ArgumentError("q has the wrong length")
        for name, val in (("Q", Q), ("A", A), ("b", b), ("G", G), ("h", h), ("q", q)):
            object.__setattr__(self, name, val)

    @property
    def n_vars(self) -> int:
        return self.Q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.G.shape[0]

    def objective(self, c: NDArray[np.float64]) -> float:
        return float(c @ self.Q @ c + self.q @ c)


@dataclass(frozen=True)
class ParameterJacobians:
    """Derivatives of the QP data with respect to key points and segment durations.

    ``b`` and ``h`` do not depend on the durations; ``Q`` and ``A`` depend on the
    durations only.  ``G`` depends on the key points only through the chord
    directions of perpendicular corridors (``dG_dxi``).
    """

    db_dxi: NDArray[np.float64]  # [p, n_kp, 3]
    dh_dxi: NDArray[np.float64]  # [q, n_kp, 3]
    dQ_dtau: NDArray[np.float64]  # [n_seg, d, d]
    dA_dtau: NDArray[np.float64]  # [n_seg, p, d]
    dG_dtau: NDArray[np.float64]  # [n_seg, q, d]
    db_dyaw: NDArray[np.float64] | None = None  # [p, n_kp]
    dG_dxi: NDArray[np.float64] | None = None  # [q, d, n_kp, 3]; perpendicular corridors only


def as_durations(times) -> NDArray[np.float64]:
    durations = getattr(times, "durations", times)
    return np.array(durations, dtype=np.float64).reshape(-1)


def as_keypoints(xi) -> KeypointPath:
    return xi if isinstance(xi, KeypointPath) else KeypointPath(np.asarray(xi, dtype=np.float64))


def var_index(seg: int, axis: int, n_axes: int, degree: int = DEFAULT_DEGREE) -> int:
    return (seg * n_axes + axis) * (degree + 1)


class _Builder:
    """Row-by-row emitter shared by :func:`assemble` and :func:`assemble_jacobians`."""

    def __init__(self, xi: KeypointPath, tau, bc, corridor, mu_r, mu_psi, degree):
        self.xi, self.tau, self.bc, self.corridor = xi, tau, bc, corridor
        self.mu_r, self.mu_psi, self.m = mu_r, mu_psi, degree
        self.n_seg = xi.n_segments
        self.n_axes = 4 if xi.yaw is not None else 3
        self.nc = degree + 1
        self.d = self.n_seg * self.n_axes * self.nc
        self.eq: list[tuple] = []  # (terms, rhs, xi_refs, yaw_refs)
        self.ineq: list[tuple] = []  # ((seg, axis, fraction, sign), rhs)

    def col(self, seg: int, axis: int) -> int:
        return var_index(seg, axis, self.n_axes, self.m)

    # a term is (seg, axis, order, at_end, sign, frac) evaluated at s = frac*tau for corridor rows
    def eval_eq(self, seg, axis, order, at_end, sign=1.0):
        return (seg, axis, order, 1.0 if at_end else 0.0, sign)

    def emit(self) -> None:
        xi, bc, n = self.xi, self.bc, self.n_seg
        pts = xi.points
        for a in range(3):
            # start and end: position then vel/acc/jerk
            self.eq.append(([self.eval_eq(0, a, 0, False)], pts[0, a], [(0, a, 1.0)], []))
            for r in range(1, K_CONT + 1):
                self.eq.append(([self.eval_eq(0, a, r, False)], bc.start_derivs[r - 1, a], [], []))
            self.eq.append(([self.eval_eq(n - 1, a, 0, True)], pts[n, a], [(n, a, 1.0)], []))
            for r in range(1, K_CONT + 1):
                self.eq.append(([self.eval_eq(n - 1, a, r, True)], bc.end_derivs[r - 1, a], [], []))
            for i in range(n - 1):
                self.eq.append(([self.eval_eq(i, a, 0, True)], pts[i + 1, a], [(i + 1, a, 1.0)], []))
            for i in range(n - 1):
                for r in range(K_CONT + 1):
                    terms = [self.eval_eq(i, a, r, True), self.eval_eq(i + 1, a, r, False, -1.0)]
                    self.eq.append((terms, 0.0, [], []))
        if self.n_axes == 4:
            yaw, a = xi.yaw, 3
            self.eq.append(([self.eval_eq(0, a, 0, False)], yaw[0], [], [(0, 1.0)]))
            self.eq.append(([self.eval_eq(0, a, 1, False)], bc.start_yaw_rate, [], []))
            self.eq.append(([self.eval_eq(n - 1, a, 0, True)], yaw[n], [], [(n, 1.0)]))
            self.eq.append(([self.eval_eq(n - 1, a, 1, True)], bc.end_yaw_rate, [], []))
            for i in range(n - 1):
                for r in range(K_CONT_YAW + 1):
                    terms = [self.eval_eq(i, a, r, True), self.eval_eq(i + 1, a, r, False, -1.0)]
                    self.eq.append((terms, 0.0, [], []))
        if self.corridor is not None:
            lc = self.corridor.half_width
            axes = sorted(AXIS_NAMES[name] for name in set(self.corridor.axes))
            for i in range(n):
                proj = _chord_projector(pts[i], pts[i + 1])
                for f in self.corridor.fractions():
                    for a in axes:
                        if self.corridor.mode == "timed":
                            line = pts[i, a] + f * (pts[i + 1, a] - pts[i, a])
                        else:
                            line = proj[a] @ pts[i]
                        for sign in (1.0, -1.0):
                            self.ineq.append(((i, a, f, sign), lc + sign * line))

    def matrices(self):
        d, nc, m, tau = self.d, self.nc, self.m, self.tau
        p, qn = len(self.eq), len(self.ineq)
        A = np.zeros((p, d))
        b = np.zeros(p)
        for row, (terms, rhs, _, _) in enumerate(self.eq):
            for seg, axis, order, end, sign in terms:
                c0 = self.col(seg, axis)
                A[row, c0 : c0 + nc] += sign * basis_row(end * tau[seg], order, m)
            b[row] = rhs
        G = np.zeros((qn, d))
        h = np.zeros(qn)
        timed = self.corridor is not None and self.corridor.mode == "timed"
        for row, ((seg, axis, f, sign), rhs) in enumerate(self.ineq):
            omega = basis_row(f * tau[seg], 0, m)
            if timed:
                c0 = self.col(seg, axis)
                G[row, c0 : c0 + nc] = sign * omega
            else:
                proj = _chord_projector(self.xi.points[seg], self.xi.points[seg + 1])
                for bx in range(3):
                    c0 = self.col(seg, bx)
                    G[row, c0 : c0 + nc] = sign * proj[axis, bx] * omega
            h[row] = rhs
        Q = np.zeros((d, d))
        for i in range(self.n_seg):
            snap = self.mu_r * gram(tau[i], 4, m)
            for a in range(3):
                c0 = self.col(i, a)
                Q[c0 : c0 + nc, c0 : c0 + nc] = snap
            if self.n_axes == 4:
                c0 = self.col(i, 3)
                Q[c0 : c0 + nc, c0 : c0 + nc] = self.mu_psi * gram(tau[i], 2, m)
        return Q, A, b, G, h

    def blocks(self) -> tuple[AxisBlock, ...] | None:
        if self.corridor is not None and self.corridor.mode == "perpendicular":
            return None
        eq_axis = np.array([terms[0][1] for terms, *_ in self.eq], dtype=np.int64)
        in_axis = np.array([spec[1] for spec, _ in self.ineq], dtype=np.int64)
        out = []
        for a in range(self.n_axes):
            cols = np.concatenate([np.arange(self.col(i, a), self.col(i, a) + self.nc) for i in range(self.n_seg)])
            out.append(
                AxisBlock(
                    axis=a,
                    variables=cols.astype(np.int64),
                    eq_rows=np.flatnonzero(eq_axis == a),
                    ineq_rows=np.flatnonzero(in_axis == a) if in_axis.size else np.zeros(0, dtype=np.int64),
                )
            )
        return tuple(out)

    def jacobians(self) -> ParameterJacobians:
        d, nc, m, tau = self.d, self.nc, self.m, self.tau
        n_kp, n_seg = self.xi.n_keypoints, self.n_seg
        p, qn = len(self.eq), len(self.ineq)
        db = np.zeros((p, n_kp, 3))
        dyaw = np.zeros((p, n_kp)) if self.n_axes == 4 else None
        dA = np.zeros((n_seg, p, d))
        for row, (terms, _, refs, yaw_refs) in enumerate(self.eq):
            for k, a, w in refs:
                db[row, k, a] += w
            for k, w in yaw_refs:
                dyaw[row, k] += w
            for seg, axis, order, end, sign in terms:
                if end:
                    c0 = self.col(seg, axis)
                    dA[seg, row, c0 : c0 + nc] += sign * basis_row_dt(tau[seg], order, m)
        dh = np.zeros((qn, n_kp, 3))
        dG = np.zeros((n_seg, qn, d))
        timed = self.corridor is not None and self.corridor.mode == "timed"
        dGx = None if timed or not qn else np.zeros((qn, d, n_kp, 3))
        pts = self.xi.points
        for row, ((seg, axis, f, sign), _) in enumerate(self.ineq):
            omega = basis_row(f * tau[seg], 0, m)
            omega_dt = f * basis_row_dt(f * tau[seg], 0, m)
            if timed:
                dh[row, seg, axis] += sign * (1.0 - f)
                dh[row, seg + 1, axis] += sign * f
                c0 = self.col(seg, axis)
                dG[seg, row, c0 : c0 + nc] = sign * omega_dt
                continue
            proj = _chord_projector(pts[seg], pts[seg + 1])
            dproj = _chord_projector_jac(pts[seg], pts[seg + 1])  # [3, 3, 3] d proj[a, b] / d delta_k
            # h = lc + sign * proj[axis] @ xi_seg
            dline = np.einsum("bk,b->k", dproj[axis], pts[seg])
            dh[row, seg] += sign * (proj[axis] - dline)
            dh[row, seg + 1] += sign * dline
            for bx in range(3):
                c0 = self.col(seg, bx)
                dG[seg, row, c0 : c0 + nc] = sign * proj[axis, bx] * omega_dt
                block = sign * np.outer(omega, dproj[axis, bx])  # [nc, 3]
                dGx[row, c0 : c0 + nc, seg + 1] += block
                dGx[row, c0 : c0 + nc, seg] -= block
        dQ = np.zeros((n_seg, d, d))
        for i in range(n_seg):
            snap = self.mu_r * gram_dtau(tau[i], 4, m)
            for a in range(3):
                c0 = self.col(i, a)
                dQ[i, c0 : c0 + nc, c0 : c0 + nc] = snap
            if self.n_axes == 4:
                c0 = self.col(i, 3)
                dQ[i, c0 : c0 + nc, c0 : c0 + nc] = self.mu_psi * gram_dtau(tau[i], 2, m)
        return ParameterJacobians(db, dh, dQ, dA, dG, dyaw, dGx)


def _chord_projector(p0: NDArray[np.float64], p1: NDArray[np.float64]) -> NDArray[np.float64]:
    """I - u u^T for the unit chord direction u; identity for a degenerate chord."""
    delta = p1 - p0
    length = np.linalg.norm(delta)
    if length < 1e-12:
        return np.eye(3)
    u = delta / length
    return np.eye(3) - np.outer(u, u)


def _chord_projector_jac(p0: NDArray[np.float64], p1: NDArray[np.float64]) -> NDArray[np.float64]:
    """d(I - u u^T)[a, b] / d delta_k as a [3, 3, 3] array (zero for a degenerate chord)."""
    delta = p1 - p0
    length = np.linalg.norm(delta)
    if length < 1e-12:
        return np.zeros((3, 3, 3))
    u = delta / length
    du = (np.eye(3) - np.outer(u, u)) / length  # du[a, k] = d u_a / d delta_k
    return -(np.einsum("ak,b->abk", du, u) + np.einsum("a,bk->abk", u, du))


def _validate(xi: KeypointPath, tau: NDArray[np.float64], mu_r: float, mu_psi: float, degree: int) -> None:
    if tau.size != xi.n_segments:
        raise ArgumentError(f"{xi.n_segments} segments need {xi.n_segments} durations, got {tau.size}")
    if not np.all(np.isfinite(tau)) or np.any(tau <= 0.0):
        raise ArgumentError("segment durations must be positive; floor them before assembly")
    if degree < 2 * K_CONT + 1:
        raise ArgumentError(f"degree {degree} too low for continuity through jerk")
    if mu_r < 0 or mu_psi < 0 or (mu_r == 0 and mu_psi == 0):
        raise ArgumentError("weights must be nonnegative and not both zero")
    if mu_r == 0:
        raise ArgumentError("mu_r = 0 leaves the position objective singular")
    if xi.yaw is not None and mu_psi == 0:
        raise ArgumentError("planning yaw requires mu_psi > 0")


def assemble(
    xi,
    times,
    bc: BoundaryConditions | None = None,
    corridor: CorridorSpec | None = None,
    mu_r: float = 1.0,
    mu_psi: float = 0.0,
    degree: int = DEFAULT_DEGREE,
) -> QpProblem:
    """Build (Q, A, b, G, h) for the min-snap problem through ``xi`` with durations ``times``."""
    xi = as_keypoints(xi)
    tau = as_durations(times)
    bc = bc or BoundaryConditions()
    _validate(xi, tau, mu_r, mu_psi, degree)
    builder = _Builder(xi, tau, bc, corridor, mu_r, mu_psi, degree)
    builder.emit()
    Q, A, b, G, h = builder.matrices()
    source = (xi.points.copy(), None if xi.yaw is None else xi.yaw.copy(), tau.copy(), bc, corridor, mu_r, mu_psi, degree)
    return QpProblem(Q=Q, A=A, b=b, G=G, h=h, blocks=builder.blocks(), source=source)


def assemble_jacobians(problem: QpProblem, xi, times) -> ParameterJacobians:
    xi = as_keypoints(xi)
    tau = as_durations(times)
    if problem.source is None:
        raise ArgumentError("problem was not produced by assemble()")
    pts, yaw, tau0, bc, corridor, mu_r, mu_psi, degree = problem.source
    same_yaw = (yaw is None and xi.yaw is None) or (
        yaw is not None and xi.yaw is not None and np.array_equal(yaw, xi.yaw)
    )
    if not (np.array_equal(pts, xi.points) and np.array_equal(tau0, tau) and same_yaw):
        raise ArgumentError("key points or durations differ from those used to assemble the problem")
    builder = _Builder(xi, tau, bc, corridor, mu_r, mu_psi, degree)
    builder.emit()
    return builder.jacobians()


def pullback(jac: ParameterJacobians, grads) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Chain QP-data gradients (from :func:`qp_solver.backward`) to (dL/dxi, dL/dtau)."""
    dxi = np.einsum("p,pkj->kj", grads.b, jac.db_dxi)
    if jac.dh_dxi.shape[0]:
        dxi += np.einsum("q,qkj->kj", grads.h, jac.dh_dxi)
    if jac.dG_dxi is not None:
        dxi += np.einsum("qd,qdkj->kj", grads.G, jac.dG_dxi)
    dtau = np.einsum("de,sde->s", grads.Q, jac.dQ_dtau) + np.einsum("pd,spd->s", grads.A, jac.dA_dtau)
    if jac.dG_dtau.shape[1]:
        dtau += np.einsum("qd,sqd->s", grads.G, jac.dG_dtau)
    return dxi, dtau


def to_polynomial(c: NDArray[np.float64], n_segments: int, durations, degree: int = DEFAULT_DEGREE) -> PiecewisePolynomial:
    c = np.asarray(c, dtype=np.float64)
    n_axes = c.size // (n_segments * (degree + 1))
    return PiecewisePolynomial(c.reshape(n_segments, n_axes, degree + 1), as_durations(durations), degree)


def solve_min_snap(
    xi,
    times,
    bc: BoundaryConditions | None = None,
    corridor: CorridorSpec | None = None,
    mu_r: float = 1.0,
    mu_psi: float = 0.0,
    degree: int = DEFAULT_DEGREE,
):
    """Assemble and solve; returns ``(poly, solution, problem)``."""
    from .qp_solver import solve  # qp_solver imports this module

    xi = as_keypoints(xi)
    problem = assemble(xi, times, bc, corridor, mu_r, mu_psi, degree)
    solution = solve(problem)
    poly = to_polynomial(solution.c, xi.n_segments, times, degree)
    return poly, solution, problem


def chord_deviation(poly: PiecewisePolynomial, xi, corridor: CorridorSpec) -> NDArray[np.float64]:
    """Deviation vectors bounded by ``corridor`` at its sample times, shape [n_seg, samples, 3]."""
    xi = as_keypoints(xi)
    fractions = corridor.fractions()
    out = np.zeros((poly.n_segments, len(fractions), 3))
    for i in range(poly.n_segments):
        tau = poly.segment_durations[i]
        proj = _chord_projector(xi.points[i], xi.points[i + 1])
        for j, f in enumerate(fractions):
            r = np.array([poly.coeffs[i, a] @ basis_row(f * tau, 0, poly.degree) for a in range(3)])
            if corridor.mode == "timed":
                out[i, j] = r - (xi.points[i] + f * (xi.points[i + 1] - xi.points[i]))
            else:
                out[i, j] = proj @ (r - xi.points[i])
    return out
