"""Finite-difference checks of every analytic gradient in the package.

Each suite returns a :class:`CheckResult` with the worst relative error
``||analytic - fd||_inf / max(||fd||_inf, floor)`` over its instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .cost_map import build_sdf, query, random_scene, sdf_to_cost, single_pillar_scene
from .losses import LossWeights, escape_cost, smoothness_cost, target_cost, time_alloc_cost
from .minsnap_qp import CorridorSpec, QpProblem, assemble, assemble_jacobians, chord_deviation, pullback, to_polynomial
from .nn.bilevel import SceneItem, TrainConfig, backward_planner, backward_tan, init_state, run_sample, sample_task
from .nn.tape import Tape, relu, sigmoid, softmax, tanh
from .qp_solver import OPTIMAL, backward, solve
from .time_alloc import allocate_uniform


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def rel_error(analytic, fd, floor: float = 1e-12) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(fd, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(a - b), initial=0.0) / max(np.max(np.abs(b), initial=0.0), floor))


def central_fd(f: Callable[[NDArray[np.float64]], float], x: NDArray[np.float64], eps: float) -> NDArray[np.float64]:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


# ---- QP ------------------------------------------------------------------------


def random_qp(rng: np.random.Generator, d: int, p: int, m: int, active_fraction: float = 0.5) -> QpProblem:
    """Random strictly convex QP with a known primal-dual point and a chosen share of active rows."""
    M = rng.normal(size=(d, d))
    Q = 0.5 * (M @ M.T) + 0.1 * np.eye(d)
    A = rng.normal(size=(p, d))
    G = rng.normal(size=(m, d))
    c0 = rng.normal(size=d)
    b = A @ c0
    active = rng.random(m) < active_fraction
    slack = np.where(active, 0.0, rng.uniform(0.5, 2.0, m))
    h = G @ c0 + slack
    lam = np.where(active, rng.uniform(0.5, 2.0, m), 0.0)
    nu = rng.normal(size=p)
    q = -(2.0 * Q @ c0 + A.T @ nu + G.T @ lam)
    return QpProblem(Q=Q, A=A, b=b, G=G, h=h, q=q)


def check_qp(n_instances: int = 10, seed: int = 0, eps: float = 1e-6, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        prob = random_qp(rng, 6, 2, 4)
        w = rng.normal(size=prob.n_vars)
        sol = solve(prob)
        grads = backward(prob, sol, w)

        def loss_b(b):
            return float(w @ solve(QpProblem(prob.Q, prob.A, b, prob.G, prob.h, prob.q)).c)

        def loss_h(h):
            return float(w @ solve(QpProblem(prob.Q, prob.A, prob.b, prob.G, h, prob.q)).c)

        def loss_q(q):
            return float(w @ solve(QpProblem(prob.Q, prob.A, prob.b, prob.G, prob.h, q)).c)

        worst = max(
            worst,
            rel_error(grads.b, central_fd(loss_b, prob.b, eps)),
            rel_error(grads.h, central_fd(loss_h, prob.h, eps)),
            rel_error(grads.q, central_fd(loss_q, prob.q, eps)),
        )
    return CheckResult("qp_backward", worst, tol, n_instances)


# ---- min-snap through the QP -----------------------------------------------------


@dataclass(frozen=True)
class CorridorCase:
    xi: NDArray[np.float64]
    tau: NDArray[np.float64]
    corridor: CorridorSpec
    weights: NDArray[np.float64]
    n_active: int
    margin: float


def random_corridor_case(rng: np.random.Generator, min_margin: float = 1e-4, max_tries: int = 50) -> CorridorCase:
    """Random 4-segment problem whose corridor binds and whose optimum is strictly complementary."""
    for _ in range(max_tries):
        steps = rng.normal(size=(4, 3))
        steps *= rng.uniform(1.0, 3.0, (4, 1)) / np.linalg.norm(steps, axis=1, keepdims=True)
        xi = np.vstack([np.zeros(3), np.cumsum(steps, axis=0)])
        tau = allocate_uniform(xi, float(np.sum(np.linalg.norm(steps, axis=1))) / 2.0).durations
        free = solve(assemble(xi, tau))
        probe = CorridorSpec(1.0)
        dev = np.abs(chord_deviation(to_polynomial(free.c, 4, tau), xi, probe)).max()
        corridor = CorridorSpec(float(rng.uniform(0.4, 0.8)) * dev)
        prob = assemble(xi, tau, corridor=corridor)
        sol = solve(prob)
        if sol.status != OPTIMAL or sol.active.sum() == 0 or sol.margin <= min_margin:
            continue
        return CorridorCase(xi, tau, corridor, rng.normal(size=prob.n_vars), int(sol.active.sum()), sol.margin)
    raise RuntimeError("no strictly complementary corridor instance found")


def corridor_case_gradients(case: CorridorCase, eps: float = 1e-5):
    """Analytic and central-difference gradients of ``w . c*`` w.r.t. key points and durations."""
    prob = assemble(case.xi, case.tau, corridor=case.corridor)
    sol = solve(prob)
    grads = backward(prob, sol, case.weights)
    dxi, dtau = pullback(assemble_jacobians(prob, case.xi, case.tau), grads)

    def loss(xi, tau):
        s = solve(assemble(xi, tau, corridor=case.corridor))
        if s.status != OPTIMAL:
            raise RuntimeError("perturbed corridor problem failed")
        return float(case.weights @ s.c)

    fd_xi = central_fd(lambda x: loss(x, case.tau), case.xi, eps)
    fd_tau = central_fd(lambda t: loss(case.xi, t), case.tau, eps)
    return dxi, fd_xi, dtau, fd_tau


def check_minsnap(n_instances: int = 5, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        dxi, fd_xi, dtau, fd_tau = corridor_case_gradients(random_corridor_case(rng))
        worst = max(worst, rel_error(dxi, fd_xi), rel_error(dtau, fd_tau))
    return CheckResult("minsnap_corridor", worst, tol, n_instances)


# ---- cost map and losses ---------------------------------------------------------


def interior_cell_points(grid, rng: np.random.Generator, n: int, pad: float = 0.15) -> NDArray[np.float64]:
    """Random points whose fractional cell coordinates stay ``pad`` away from cell faces."""
    dims = np.asarray(grid.dims)
    cells = rng.integers(0, dims - 1, size=(n, 3))
    frac = rng.uniform(pad, 1.0 - pad, size=(n, 3))
    return grid.origin + grid.resolution * (cells + frac)


def check_esdf(n_points: int = 200, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    grid = sdf_to_cost(build_sdf(random_scene(rng, 3), 0.1))
    h = 0.1 * grid.resolution
    worst = 0.0
    for p in interior_cell_points(grid, rng, n_points):
        g = query(grid, p).gradient
        fd = np.array([(query(grid, p + h * e).cost - query(grid, p - h * e).cost) / (2 * h) for e in np.eye(3)])
        worst = max(worst, rel_error(g, fd, floor=1e-9))
    return CheckResult("esdf_query", worst, tol, n_points)


def check_losses(n_instances: int = 50, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        p, g = rng.normal(size=3), rng.normal(size=3)
        worst = max(worst, rel_error(target_cost(p, g)[1], central_fd(lambda x: target_cost(x, g)[0], p, 1e-6)))
        wp = rng.normal(size=(5, 3)) * 2.0
        s, goal = rng.normal(size=3), rng.normal(size=3) * 3.0
        an = smoothness_cost(wp, s, goal)[1]
        worst = max(worst, rel_error(an, central_fd(lambda x: smoothness_cost(x, s, goal)[0], wp, 1e-7)))
        pr, ref = rng.random(4), rng.random(4)
        worst = max(worst, rel_error(time_alloc_cost(pr, ref)[1], central_fd(lambda x: time_alloc_cost(x, ref)[0], pr, 1e-6)))
    for eta in (0.1, 0.5, 0.9):
        for label in (False, True):
            fd = (escape_cost(eta + 1e-7, label)[0] - escape_cost(eta - 1e-7, label)[0]) / 2e-7
            worst = max(worst, rel_error(escape_cost(eta, label)[1], fd))
    return CheckResult("losses", worst, tol, n_instances)


# ---- tape ------------------------------------------------------------------------


def check_tape(seed: int = 0, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    up = rng.normal(size=3)
    ops = {
        "affine": lambda v: v @ W + b,
        "relu": relu,
        "tanh": tanh,
        "sigmoid": sigmoid,
        "softmax": softmax,
    }
    worst = 0.0
    for name, op in ops.items():
        x = rng.normal(size=4 if name == "affine" else 3)
        tape = Tape()
        xv = tape.leaf(x)
        out = op(xv) if name != "affine" else op(xv)
        tape.backward(out, up)

        def f(z, op=op, name=name):
            t = Tape()
            return float(up @ op(t.leaf(z)).value)

        worst = max(worst, rel_error(xv.grad, central_fd(f, x, 1e-6)))
    return CheckResult("tape_ops", worst, tol, len(ops))


# ---- end to end ------------------------------------------------------------------


def check_pipeline(n_coords: int = 10, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    """Planner and allocation-network gradients through the QP against re-running the pipeline.

    Reference fractions are frozen so the finite difference does not see
    the (non-differentiated) relabelling of perturbed paths.
    """
    rng = np.random.default_rng(seed)
    scene = single_pillar_scene()
    item = SceneItem(scene, sdf_to_cost(build_sdf(scene, 0.1)))
    cfg = TrainConfig(planner_hidden=(16,), tan_hidden=(8,))
    state = init_state(cfg, seed)
    state.set_parameters([p + 0.05 * rng.normal(size=p.shape) for p in state.parameters()])
    start, goal = sample_task(item, rng)
    fixed = rng.dirichlet(np.ones(cfg.n_segments))

    def labels(_xi):
        return fixed

    rec = run_sample(state, item.grid, start, goal, labels)
    analytic = backward_planner(rec) + backward_tan(rec)
    base = [p.copy() for p in state.parameters()]
    picks = []
    for _ in range(n_coords):
        li = int(rng.integers(len(base)))
        picks.append((li, tuple(int(rng.integers(n)) for n in base[li].shape)))
    an, fd = [], []
    eps = 1e-6
    for li, idx in picks:
        vals = []
        for sgn in (1.0, -1.0):
            ps = [p.copy() for p in base]
            ps[li][idx] += sgn * eps
            state.set_parameters(ps)
            vals.append(run_sample(state, item.grid, start, goal, labels).breakdown.total)
        an.append(analytic[li][idx])
        fd.append((vals[0] - vals[1]) / (2 * eps))
    state.set_parameters(base)
    return CheckResult("pipeline", rel_error(an, fd), tol, n_coords)


SUITES = {
    "qp_backward": check_qp,
    "minsnap_corridor": check_minsnap,
    "esdf_query": check_esdf,
    "losses": check_losses,
    "tape_ops": check_tape,
    "pipeline": check_pipeline,
}


def run_all(seed: int = 0) -> list[CheckResult]:
    return [fn(seed=seed) for fn in SUITES.values()]
