"""Per-segment time allocation strategies for a key-point path."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ArgumentError
from .minsnap_qp import BoundaryConditions, KeypointPath, as_keypoints, assemble, assemble_jacobians, pullback
from .qp_solver import OPTIMAL, backward, solve

log = logging.getLogger(__name__)

TAU_MIN = 0.05
STRATEGIES = ("uniform", "accel5", "gd", "learned")


@dataclass(frozen=True)
class TimeAllocation:
    durations: NDArray[np.float64]
    status: str = "ok"

    def __post_init__(self) -> None:
        d = np.array(self.durations, dtype=np.float64).reshape(-1)
        if d.size == 0 or not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ArgumentError("durations must be finite and positive")
        object.__setattr__(self, "durations", d)

    @property
    def total(self) -> float:
        return float(np.sum(self.durations))

    @property
    def fractions(self) -> NDArray[np.float64]:
        return self.durations / self.total

    @property
    def timestamps(self) -> NDArray[np.float64]:
        return np.cumsum(self.durations)


@dataclass(frozen=True)
class GdParams:
    armijo_c1: float = 1e-4
    shrink: float = 0.5
    max_iter: int = 50
    rel_tol: float = 1e-5
    initial_step: float = 0.25  # fraction of total time moved by the first trial step
    max_backtracks: int = 30


@dataclass
class GdTrace:
    objectives: list[float] = field(default_factory=list)
    rejected_steps: int = 0


def total_time(xi, v_nominal: float, tau_min: float = TAU_MIN) -> float:
    if not v_nominal > 0:
        raise ArgumentError("v_nominal must be positive")
    xi = as_keypoints(xi)
    return max(float(np.sum(xi.chord_lengths)) / v_nominal, xi.n_segments * tau_min)


def floor_renormalize(weights: NDArray[np.float64], total: float, tau_min: float = TAU_MIN) -> NDArray[np.float64]:
    """Split ``total`` proportionally to ``weights`` with every share at least ``tau_min``."""
    w = np.asarray(weights, dtype=np.float64)
    n = w.size
    if total < n * tau_min - 1e-12:
        raise ArgumentError(f"total {total} below the floor {n} x {tau_min}")
    floored = np.zeros(n, dtype=bool)
    while True:
        free = ~floored
        budget = total - floored.sum() * tau_min
        wsum = w[free].sum()
        out = np.full(n, tau_min)
        if wsum <= 0:
            out[free] = budget / free.sum()
        else:
            out[free] = budget * w[free] / wsum
        newly = free & (out < tau_min)
        if not newly.any():
            return out
        floored |= newly


def allocate_uniform(xi, total: float, equal: bool = False, tau_min: float = TAU_MIN) -> TimeAllocation:
    """Chord-proportional durations (``equal=True``: identical durations) summing to ``total``."""
    if not total > 0:
        raise ArgumentError("total must be positive")
    xi = as_keypoints(xi)
    if equal:
        return TimeAllocation(np.full(xi.n_segments, total / xi.n_segments))
    return TimeAllocation(floor_renormalize(xi.chord_lengths, total, tau_min))


def accel_decel_duration(length: float, v_nominal: float, a_max: float, tau_min: float = TAU_MIN) -> float:
    # rest-to-rest quintic: peak speed 15L/(8 tau), peak acceleration 10L/(sqrt(3) tau^2)
    tau_v = 15.0 * length / (8.0 * v_nominal)
    tau_a = math.sqrt(10.0 * length / (math.sqrt(3.0) * a_max))
    return max(tau_v, tau_a, tau_min)


def allocate_accel_decel(xi, v_nominal: float, a_max: float, tau_min: float = TAU_MIN) -> TimeAllocation:
    if not (v_nominal > 0 and a_max > 0):
        raise ArgumentError("v_nominal and a_max must be positive")
    xi = as_keypoints(xi)
    return TimeAllocation([accel_decel_duration(L, v_nominal, a_max, tau_min) for L in xi.chord_lengths])


def snap_objective(xi, durations, bc: BoundaryConditions | None = None, with_grad: bool = False):
    """J(T) = c*(T)^T Q(T) c*(T) and, optionally, dJ/dT via the QP backward pass."""
    xi = as_keypoints(xi)
    problem = assemble(xi, durations, bc)
    sol = solve(problem)
    if sol.status != OPTIMAL:
        return (math.inf, None) if with_grad else math.inf
    J = float(sol.c @ problem.Q @ sol.c)
    if not with_grad:
        return J
    P = problem.Q + problem.Q.T
    grads = backward(problem, sol, P @ sol.c)
    jac = assemble_jacobians(problem, xi, durations)
    # explicit dependence of J on Q in addition to the path through c*
    _, dtau_c = pullback(jac, grads)
    dtau_q = np.einsum("i,sij,j->s", sol.c, jac.dQ_dtau, sol.c)
    return J, dtau_c + dtau_q


def project_capped_simplex(v: NDArray[np.float64], total: float, tau_min: float = TAU_MIN) -> NDArray[np.float64]:
    """Euclidean projection onto {x >= tau_min, sum x = total}."""
    n = v.size
    budget = total - n * tau_min
    y = v - tau_min
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - budget
    idx = np.arange(1, n + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(y - theta, 0.0) + tau_min


def allocate_gradient_descent(
    xi,
    bc: BoundaryConditions | None,
    total: float,
    params: GdParams | None = None,
    init: NDArray[np.float64] | None = None,
    tau_min: float = TAU_MIN,
    trace: GdTrace | None = None,
) -> TimeAllocation:
    """Projected gradient descent on the snap objective over the fixed-total simplex."""
    params = params or GdParams()
    xi = as_keypoints(xi)
    tau = allocate_uniform(xi, total, tau_min=tau_min).durations if init is None else np.asarray(init, float)
    J, g = snap_objective(xi, tau, bc, with_grad=True)
    if not math.isfinite(J):
        return TimeAllocation(tau, status="qp_failure")
    if trace is not None:
        trace.objectives.append(J)
    status = "ok"
    for _ in range(params.max_iter):
        gp = g - g.mean()
        gnorm = np.max(np.abs(gp))
        if gnorm == 0:
            break
        step = params.initial_step * total / gnorm
        accepted = False
        for _ in range(params.max_backtracks):
            cand = project_capped_simplex(tau - step * gp, total, tau_min)
            Jc = snap_objective(xi, cand, bc)
            if math.isfinite(Jc) and Jc <= J - params.armijo_c1 * float(g @ (tau - cand)):
                accepted = True
                break
            if trace is not None and not math.isfinite(Jc):
                trace.rejected_steps += 1
            step *= params.shrink
        if not accepted:
            break
        decrease = (J - Jc) / J if J > 0 else 0.0
        tau = cand
        J, g = snap_objective(xi, tau, bc, with_grad=True)
        if not math.isfinite(J):
            status = "qp_failure"
            log.warning("QP failed at an accepted iterate; returning it anyway")
            break
        if trace is not None:
            trace.objectives.append(J)
        if decrease < params.rel_tol:
            break
    return TimeAllocation(tau, status=status)


def tan_features(points: NDArray[np.float64]) -> NDArray[np.float64]:
    """Segment displacements and chord lengths normalized by path length."""
    delta = np.diff(np.asarray(points, dtype=np.float64), axis=0)
    lengths = np.linalg.norm(delta, axis=1)
    scale = max(float(lengths.sum()), 1e-9)
    return np.concatenate([(delta / scale).reshape(-1), lengths / scale])


def allocate_learned(xi, total: float, tan, tau_min: float = TAU_MIN) -> TimeAllocation:
    """``total`` times the softmax fractions of the Time Allocation Net ``tan``."""
    xi = as_keypoints(xi)
    feats = tan_features(xi.points)
    if feats.size != tan.input_dim:
        raise ArgumentError(
            f"network expects {tan.input_dim} features ({tan.input_dim // 4 + 1} key points), "
            f"path has {xi.n_keypoints} key points"
        )
    fractions = tan.predict(feats)
    return TimeAllocation(floor_renormalize(fractions, total, tau_min))


def random_path(
    rng: np.random.Generator,
    n_keypoints: int = 5,
    chord_range: tuple[float, float] = (0.1, 10.0),
) -> NDArray[np.float64]:
    """Path from the origin with log-uniform chord lengths and isotropic directions."""
    lo, hi = chord_range
    if not 0 < lo <= hi:
        raise ArgumentError("chord_range must satisfy 0 < lo <= hi")
    lengths = np.exp(rng.uniform(np.log(lo), np.log(hi), n_keypoints - 1))
    dirs = rng.normal(size=(n_keypoints - 1, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.vstack([np.zeros(3), np.cumsum(lengths[:, None] * dirs, axis=0)])
