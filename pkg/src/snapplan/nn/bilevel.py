"""Bi-level training: networks above, the min-snap QP below, gradients through its KKT system."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from ..cost_map import ROBOT_RADIUS, EsdfGrid, Scene, collision_check, query_many
from ..errors import ArgumentError, SolverFailure, StateError, TrainingDivergence
from ..losses import LossWeights, total_loss
from ..minsnap_qp import assemble, assemble_jacobians, pullback, to_polynomial
from ..piecewise_poly import basis_matrix, evaluate_many, sample_times
from ..qp_solver import OPTIMAL, backward, solve
from ..time_alloc import (
    TAU_MIN,
    allocate_gradient_descent,
    floor_renormalize,
    random_path,
    tan_features,
    total_time,
)
from .mlp import Adam, Mlp
from .tape import Tape, Var, concat, custom, norm, sigmoid, softmax, square, tanh

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
N_PROBES = 64
MODES = ("bilevel", "tan")


@dataclass(frozen=True)
class ProbeLayout:
    """Cylindrical lattice of probe offsets around the start-goal chord."""

    stations: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    radii: tuple[float, ...] = (0.5, 1.0)
    n_angles: int = 8
    phase: float = 0.0

    @classmethod
    def from_seed(cls, seed: int) -> "ProbeLayout":
        phase = float(np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi / 8))
        return cls(phase=phase)

    @property
    def size(self) -> int:
        return len(self.stations) * len(self.radii) * self.n_angles

    def points(self, start, goal) -> NDArray[np.float64]:
        s = np.asarray(start, dtype=np.float64)
        g = np.asarray(goal, dtype=np.float64)
        d = g - s
        length = float(np.linalg.norm(d))
        u = d / length if length > 0 else np.array([1.0, 0.0, 0.0])
        ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(u, ref)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(u, e1)
        angles = self.phase + 2.0 * np.pi * np.arange(self.n_angles) / self.n_angles
        out = []
        for f in self.stations:
            for r in self.radii:
                for a in angles:
                    out.append(s + f * d + r * (np.cos(a) * e1 + np.sin(a) * e2))
        return np.array(out)


@dataclass(frozen=True)
class PlannerInput:
    goal_body: NDArray[np.float64]
    esdf_probe: NDArray[np.float64]

    def __post_init__(self) -> None:
        g = np.asarray(self.goal_body, dtype=np.float64).reshape(-1)
        p = np.asarray(self.esdf_probe, dtype=np.float64).reshape(-1)
        if g.size != 3 or not (np.all(np.isfinite(g)) and np.all(np.isfinite(p))):
            raise ArgumentError("planner input must be finite with a 3D goal")
        object.__setattr__(self, "goal_body", g)
        object.__setattr__(self, "esdf_probe", p)

    def features(self) -> NDArray[np.float64]:
        return np.concatenate([self.goal_body, self.esdf_probe])


def make_planner_input(grid: EsdfGrid, start, goal, layout: ProbeLayout) -> PlannerInput:
    """Body frame is the world frame translated to ``start`` (zero yaw)."""
    start = np.asarray(start, dtype=np.float64)
    probes, _, _ = query_many(grid, layout.points(start, goal))
    return PlannerInput(np.asarray(goal, dtype=np.float64) - start, probes)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "bilevel"
    steps: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    n_keypoints: int = 5
    probe_layout_seed: int = 0
    offset_scale: float = 2.0
    v_nominal: float = 2.0
    sample_rate: float = 50.0
    tan_live_xi: bool = True
    strict_degenerate: bool = False
    collision_margin: float = ROBOT_RADIUS
    max_skip_rate: float = 0.1
    planner_hidden: tuple[int, ...] = (64, 64)
    tan_hidden: tuple[int, ...] = (64, 64)
    tan_train_paths: int = 400
    tan_val_paths: int = 100
    tan_epochs: int = 1000
    tan_batch: int = 64
    chord_range: tuple[float, float] = (0.1, 10.0)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ArgumentError(f"mode must be one of {MODES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ArgumentError("optimizer must be 'adam' or 'sgd'")
        if not 3 <= self.n_keypoints <= 8:
            raise ArgumentError("n_keypoints must be in [3, 8]")
        if self.steps < 0 or self.batch_size < 1:
            raise ArgumentError("steps must be >= 0 and batch_size >= 1")
        if not (self.learning_rate > 0 and self.offset_scale > 0 and self.v_nominal > 0 and self.sample_rate > 0):
            raise ArgumentError("learning_rate, offset_scale, v_nominal and sample_rate must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ArgumentError(f"unknown config keys {sorted(unknown)}")
        kw = dict(d)
        if "loss_weights" in kw:
            kw["loss_weights"] = LossWeights.from_dict(kw["loss_weights"])
        for key in ("planner_hidden", "tan_hidden", "chord_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ArgumentError(str(exc)) from None

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if isinstance(v, LossWeights) else (list(v) if isinstance(v, tuple) else v)
        return out

    @property
    def n_segments(self) -> int:
        return self.n_keypoints - 1


@dataclass
class TrainState:
    config: TrainConfig
    planner: Mlp
    tan: Mlp
    optimizer: Adam
    step: int = 0
    seed: int = 0

    def parameters(self) -> list[NDArray[np.float64]]:
        return self.planner.parameters() + self.tan.parameters()

    def set_parameters(self, params: list[NDArray[np.float64]]) -> None:
        k = len(self.planner.parameters())
        self.planner.set_parameters(params[:k])
        self.tan.set_parameters(params[k:])

    @property
    def layout(self) -> ProbeLayout:
        return ProbeLayout.from_seed(self.config.probe_layout_seed)

    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "step": self.step,
            "config": self.config.to_dict(),
            "planner": self.planner.to_json(),
            "tan": self.tan.to_json(),
            "optimizer": self.optimizer.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainState":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ArgumentError(f"unsupported checkpoint version {d.get('version')!r}")
        try:
            return cls(
                TrainConfig.from_dict(d["config"]),
                Mlp.from_json(d["planner"]),
                Mlp.from_json(d["tan"]),
                Adam.from_json(d["optimizer"]),
                int(d["step"]),
                int(d["seed"]),
            )
        except KeyError as exc:
            raise ArgumentError(f"checkpoint is missing {exc}") from None


def init_state(config: TrainConfig, seed: int) -> TrainState:
    """Output layers start at zero: key points on the chord, eta = 0.5, uniform fractions."""
    rng = np.random.default_rng([seed, 0x5EED])
    n_seg = config.n_segments
    planner = Mlp.init([3 + N_PROBES, *config.planner_hidden, 3 * n_seg + 1], "relu", "identity", rng, zero_last=True)
    tan = Mlp.init([4 * n_seg, *config.tan_hidden, n_seg], "tanh", "softmax", rng, zero_last=True)
    opt = Adam(lr=config.learning_rate, plain_sgd=config.optimizer == "sgd")
    return TrainState(config, planner, tan, opt, 0, seed)


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_text(json.dumps(state.to_json()) + "\n", encoding="utf-8")


def load_checkpoint(path) -> TrainState:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}") from None
    return TrainState.from_json(data)


def chord_points(start, goal, n: int) -> NDArray[np.float64]:
    s = np.asarray(start, dtype=np.float64)
    g = np.asarray(goal, dtype=np.float64)
    return s + np.linspace(0.0, 1.0, n)[:, None] * (g - s)


def _split_output(out: NDArray[np.float64], n_seg: int, scale: float):
    offsets = scale * np.tanh(out[: 3 * n_seg]).reshape(n_seg, 3)
    eta = 1.0 / (1.0 + math.exp(-float(out[-1])))
    return offsets, eta


def forward_planner(state: TrainState, inp: PlannerInput, start, goal) -> tuple[NDArray[np.float64], float]:
    """Key points (start pinned, the rest offset from the chord) and the collision probability."""
    cfg = state.config
    feats = inp.features()
    if feats.size != state.planner.input_dim:
        raise ArgumentError(f"planner expects {state.planner.input_dim} inputs, got {feats.size}")
    offsets, eta = _split_output(state.planner.predict(feats), cfg.n_segments, cfg.offset_scale)
    xi = chord_points(start, goal, cfg.n_keypoints)
    xi[1:] += offsets
    return xi, eta


def learned_durations(tan: Mlp, xi, v_nominal: float) -> NDArray[np.float64]:
    fractions = tan.predict(tan_features(xi))
    return floor_renormalize(fractions, total_time(xi, v_nominal))


class LabelCache:
    """Gradient-descent allocation fractions keyed by the exact bytes of the path."""

    def __init__(self, v_nominal: float) -> None:
        self.v_nominal = v_nominal
        self.store: dict[str, NDArray[np.float64]] = {}
        self.misses = 0

    def __call__(self, xi: NDArray[np.float64]) -> NDArray[np.float64]:
        key = hashlib.sha1(np.ascontiguousarray(xi, dtype=np.float64).tobytes()).hexdigest()
        if key not in self.store:
            self.misses += 1
            alloc = allocate_gradient_descent(xi, None, total_time(xi, self.v_nominal))
            self.store[key] = alloc.fractions
        return self.store[key]


# ---- tape nodes ---------------------------------------------------------------


def _tan_features_var(xi: Var) -> Var:
    d = xi[1:] - xi[:-1]
    lengths = norm(d, axis=1)
    total = lengths.sum()
    return concat([(d / total).reshape(-1), lengths / total])


def _total_time_var(xi: Var, v_nominal: float, n_seg: int) -> Var:
    T = norm(xi[1:] - xi[:-1], axis=1).sum() / v_nominal
    floor = n_seg * TAU_MIN
    return T if T.value > floor else T.tape.const(floor)


def _floor_renormalize_var(g: Var, T: Var) -> Var:
    gv, Tv = g.value, float(T.value)
    out = floor_renormalize(gv, Tv)
    free = out > TAU_MIN
    budget = Tv - (~free).sum() * TAU_MIN
    S = gv[free].sum()

    def vjp(up):
        gg = np.zeros_like(gv)
        if S > 0:
            uf = up[free]
            gg[free] = budget * (uf / S - (uf @ gv[free]) / S**2)
            gT = (uf @ gv[free]) / S
        else:
            gT = 0.0
        return gg, np.asarray(gT)

    return custom([g, T], out, vjp)


@dataclass
class QpRecord:
    problem: object
    solution: object
    degenerate: bool = False


def _qp_var(xi: Var, tau: Var, strict: bool, rec: QpRecord) -> Var:
    problem = assemble(xi.value, tau.value)
    sol = solve(problem)
    if sol.status != OPTIMAL:
        raise SolverFailure(f"QP status {sol.status}")
    rec.problem, rec.solution = problem, sol

    def vjp(gc):
        grads = backward(problem, sol, gc, strict=strict)
        rec.degenerate = rec.degenerate or grads.degenerate
        jac = assemble_jacobians(problem, xi.value, tau.value)
        return pullback(jac, grads)

    return custom([xi, tau], sol.c, vjp)


def _sample_var(c: Var, tau: Var, rate: float, degree: int = 7) -> Var:
    """Positions at the fixed global lattice of ``sample_times`` plus the terminal point."""
    n_seg = tau.value.size
    coeffs = c.value.reshape(n_seg, -1, degree + 1)[:, :3]
    knots = np.concatenate([[0.0], np.cumsum(tau.value)])
    ts = sample_times(float(knots[-1]), rate)
    seg = np.clip(np.searchsorted(knots, ts, side="left") - 1, 0, n_seg - 1)
    local = ts - knots[seg]
    local[-1] = tau.value[-1]  # terminal sample sits at the end of the last segment
    B0 = basis_matrix(local, 0, degree)
    B1 = basis_matrix(local, 1, degree)
    pos = np.einsum("nk,nak->na", B0, coeffs[seg])
    vel = np.einsum("nk,nak->na", B1, coeffs[seg])
    # d local / d tau_k: -1 for earlier segments on the fixed lattice, +1 on the last segment for the terminal point
    dlocal = -(np.arange(n_seg)[None, :] < seg[:, None]).astype(np.float64)
    dlocal[-1] = 0.0
    dlocal[-1, -1] = 1.0
    n_axes = c.value.size // (n_seg * (degree + 1))

    def vjp(g):
        gc = np.zeros((n_seg, n_axes, degree + 1))
        np.add.at(gc, (seg, slice(0, 3)), g[:, :, None] * B0[:, None, :])
        ds = np.sum(g * vel, axis=1)
        return gc.reshape(-1), ds @ dlocal

    return custom([c, tau], pos, vjp)


@dataclass
class Forward:
    """One recorded sample: tape, bound parameters and loss."""

    tape: Tape
    planner_params: list[Var]
    tan_params: list[Var]
    loss: Var
    breakdown: object
    xi: NDArray[np.float64]
    eta: float
    durations: NDArray[np.float64]
    samples: NDArray[np.float64]
    collided: bool
    qp: QpRecord

    def _sweep(self) -> None:
        if not self.tape.swept:
            self.tape.backward(self.loss)


def run_sample(
    state: TrainState,
    grid: EsdfGrid,
    start,
    goal,
    labels: LabelCache | None = None,
    detach_direct: bool = False,
) -> Forward:
    """Record the full forward pipeline for one (start, goal) pair on a fresh tape.

    ``detach_direct`` cuts the key points' direct routes into the QP and the
    smoothness term, leaving only the route through the allocation network.
    """
    cfg = state.config
    n, n_seg = cfg.n_keypoints, cfg.n_segments
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    tape = Tape()
    pp = state.planner.bind(tape)
    tp = state.tan.bind(tape)
    inp = make_planner_input(grid, start, goal, state.layout)
    out = state.planner.forward(inp.features(), pp)
    offsets = tanh(out[: 3 * n_seg]) * cfg.offset_scale
    eta = sigmoid(out[3 * n_seg])
    xi = concat([tape.const(start[None, :]), offsets.reshape(n_seg, 3) + chord_points(start, goal, n)[1:]])
    xi_tan = xi if cfg.tan_live_xi else xi.detach()
    xi_direct = xi.detach() if detach_direct else xi
    fractions = state.tan.forward(_tan_features_var(xi_tan), tp)
    T = _total_time_var(xi_tan, cfg.v_nominal, n_seg)
    tau = _floor_renormalize_var(fractions, T)
    rec = QpRecord(None, None)
    c = _qp_var(xi_direct, tau, cfg.strict_degenerate, rec)
    samples = _sample_var(c, tau, cfg.sample_rate)
    collided = collision_check(grid, samples.value, cfg.collision_margin).collision
    w = cfg.loss_weights
    ref = labels(xi.value) if (labels is not None and w.time_alloc > 0) else None
    br = total_loss(
        w, samples.value, grid, goal, xi_direct.value, start, float(eta.value), collided,
        fractions.value, ref,
    )

    def vjp(g):
        g = float(g)
        return g * br.grad_samples_total, g * br.grad_waypoints, g * br.grad_eta, g * br.grad_fractions

    loss = custom([samples, xi_direct, eta, fractions], br.total, vjp)
    return Forward(tape, pp, tp, loss, br, xi.value, float(eta.value), tau.value, samples.value, collided, rec)


def _grads(params: list[Var]) -> list[NDArray[np.float64]]:
    return [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]


def backward_planner(rec: Forward | None) -> list[NDArray[np.float64]]:
    """Gradient of the recorded loss w.r.t. the planner parameters (both chain-rule routes)."""
    if rec is None:
        raise StateError("backward_planner needs a recorded forward pass")
    rec._sweep()
    return _grads(rec.planner_params)


def backward_tan(rec: Forward | None) -> list[NDArray[np.float64]]:
    """Gradient w.r.t. the allocation network: trajectory route plus direct supervision."""
    if rec is None:
        raise StateError("backward_tan needs a recorded forward pass")
    rec._sweep()
    return _grads(rec.tan_params)


# ---- training -----------------------------------------------------------------


METRIC_FIELDS = (
    "step", "total", "obstacle", "target", "smoothness", "escape", "time_alloc",
    "collisions", "skipped", "degenerate",
)


@dataclass
class SceneItem:
    scene: Scene
    grid: EsdfGrid


def sample_task(item: SceneItem, rng: np.random.Generator, clearance: float = 0.6, max_tries: int = 1000):
    """Start near the low-x face of the scene, goal near the high-x face, both in free space."""
    lo, hi = item.scene.bounds_min, item.scene.bounds_max
    span = hi - lo
    for _ in range(max_tries):
        s = lo + span * np.array([rng.uniform(0.05, 0.15), rng.uniform(0.2, 0.8), rng.uniform(0.3, 0.7)])
        g = lo + span * np.array([rng.uniform(0.85, 0.95), rng.uniform(0.2, 0.8), rng.uniform(0.3, 0.7)])
        sd = item.scene.signed_distance(np.stack([s, g]))
        if np.all(sd > clearance):
            return s, g
    raise ArgumentError("could not find a free start/goal pair")


def _check_finite(value: float, step: int, diag: dict) -> None:
    if not math.isfinite(value):
        raise TrainingDivergence(f"non-finite loss at step {step}: {json.dumps(diag, default=str)}")


def train(state: TrainState, scenes: list[SceneItem], steps: int | None = None, labels: LabelCache | None = None):
    """Run ``steps`` bi-level updates in place; returns the per-step metrics rows.

    Each step draws its tasks from ``default_rng([seed, step])`` so that a
    run resumed from a checkpoint retraces an uninterrupted one exactly.
    """
    cfg = state.config
    if not scenes:
        raise ArgumentError("training needs at least one scene")
    steps = cfg.steps if steps is None else steps
    labels = labels or LabelCache(cfg.v_nominal)
    rows = []
    total_skipped = total_samples = 0
    for _ in range(steps):
        step = state.step
        rng = np.random.default_rng([state.seed, step])
        params = state.parameters()
        acc = [np.zeros_like(p) for p in params]
        sums = dict.fromkeys(("total", "obstacle", "target", "smoothness", "escape", "time_alloc"), 0.0)
        n_ok = skipped = degenerate = collisions = 0
        for _ in range(cfg.batch_size):
            item = scenes[int(rng.integers(len(scenes)))]
            start, goal = sample_task(item, rng)
            total_samples += 1
            try:
                rec = run_sample(state, item.grid, start, goal, labels)
                _check_finite(rec.breakdown.total, step, {"start": start.tolist(), "goal": goal.tolist()})
                g = backward_planner(rec) + backward_tan(rec)
            except SolverFailure as exc:
                log.info("step %d: sample skipped (%s)", step, exc)
                skipped += 1
                continue
            for i, gi in enumerate(g):
                acc[i] += gi
            n_ok += 1
            degenerate += int(rec.qp.degenerate)
            collisions += int(rec.collided)
            sums["total"] += rec.breakdown.total
            for k, v in rec.breakdown.terms.items():
                sums[k] += v
        total_skipped += skipped
        if n_ok:
            grads = [a / n_ok for a in acc]
            if not all(np.all(np.isfinite(gi)) for gi in grads):
                raise TrainingDivergence(f"non-finite gradient at step {step}")
            state.set_parameters(state.optimizer.step(params, grads))
        state.step += 1
        row = {"step": step, **{k: v / max(n_ok, 1) for k, v in sums.items()},
               "collisions": collisions, "skipped": skipped, "degenerate": degenerate}
        rows.append(row)
    if total_samples and total_skipped / total_samples > cfg.max_skip_rate:
        raise TrainingDivergence(f"skip rate {total_skipped}/{total_samples} exceeds {cfg.max_skip_rate:.0%}")
    return rows


@dataclass
class TanDataset:
    paths: NDArray[np.float64]
    fractions: NDArray[np.float64]


def tan_dataset(cfg: TrainConfig, n_paths: int, seed, labels: LabelCache | None = None) -> TanDataset:
    rng = np.random.default_rng(seed)
    labels = labels or LabelCache(cfg.v_nominal)
    paths = np.array([random_path(rng, cfg.n_keypoints, cfg.chord_range) for _ in range(n_paths)])
    return TanDataset(paths, np.array([labels(p) for p in paths]))


def _random_rotations(rng: np.random.Generator, n: int) -> NDArray[np.float64]:
    q, r = np.linalg.qr(rng.normal(size=(n, 3, 3)))
    q *= np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]
    det = np.linalg.det(q)
    q[:, :, 0] *= det[:, None]
    return q


def augment(paths: NDArray[np.float64], fractions: NDArray[np.float64], rng: np.random.Generator):
    """Random rotation and reversal; both leave the optimal fractions unchanged up to reordering."""
    R = _random_rotations(rng, len(paths))
    out = np.einsum("bij,bnj->bni", R, paths)
    flip = rng.random(len(paths)) < 0.5
    out[flip] = out[flip, ::-1]
    fr = fractions.copy()
    fr[flip] = fr[flip, ::-1]
    return out, fr


def tan_mse(tan: Mlp, data: TanDataset) -> float:
    feats = np.array([tan_features(p) for p in data.paths])
    return float(np.mean((tan.predict(feats) - data.fractions) ** 2))


def train_tan(state: TrainState, train_data: TanDataset, val_data: TanDataset | None = None, epochs: int | None = None):
    """Supervised fit of the allocation network to gradient-descent fractions.

    Only the allocation network is updated; the state's optimizer then holds
    moments for those parameters alone.
    """
    cfg = state.config
    epochs = cfg.tan_epochs if epochs is None else epochs
    opt = state.optimizer
    rows = []
    n = len(train_data.paths)
    for _ in range(epochs):
        epoch = state.step
        rng = np.random.default_rng([state.seed, epoch])
        paths, fr = augment(train_data.paths, train_data.fractions, rng)
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.tan_batch):
            idx = order[lo : lo + cfg.tan_batch]
            feats = np.array([tan_features(p) for p in paths[idx]])
            tape = Tape()
            params = state.tan.bind(tape)
            pred = state.tan.forward(feats, params)
            loss = square(pred - fr[idx]).mean()
            tape.backward(loss)
            losses.append(float(loss.value))
            state.tan.set_parameters(opt.step(state.tan.parameters(), _grads(params)))
        _check_finite(losses[-1], epoch, {"epoch": epoch})
        state.step += 1
        row = {"step": epoch, "train_mse": float(np.mean(losses))}
        if val_data is not None:
            row["val_mse"] = tan_mse(state.tan, val_data)
        rows.append(row)
    return rows


def evaluate_planner(state: TrainState, item: SceneItem, n_pairs: int, seed: int) -> dict:
    """Plan with the network on held-out pairs and count collision-free trajectories."""
    rng = np.random.default_rng(seed)
    cfg = state.config
    free = 0
    failures = 0
    for _ in range(n_pairs):
        start, goal = sample_task(item, rng)
        inp = make_planner_input(item.grid, start, goal, state.layout)
        xi, _ = forward_planner(state, inp, start, goal)
        tau = learned_durations(state.tan, xi, cfg.v_nominal)
        problem = assemble(xi, tau)
        sol = solve(problem)
        if sol.status != OPTIMAL:
            failures += 1
            continue
        poly = to_polynomial(sol.c, cfg.n_segments, tau)
        ts = sample_times(poly.total_time, cfg.sample_rate)
        pts = evaluate_many(poly, ts, 0)[:, 0, :3]
        if not collision_check(item.grid, pts, cfg.collision_margin).collision:
            free += 1
    return {"pairs": n_pairs, "collision_free": free, "qp_failures": failures, "rate": free / n_pairs}



def tan_datasets(state: TrainState, labels: LabelCache | None = None) -> tuple[TanDataset, TanDataset]:
    """Training and held-out path sets drawn from seeds derived from the state's seed."""
    cfg = state.config
    labels = labels or LabelCache(cfg.v_nominal)
    train_data = tan_dataset(cfg, cfg.tan_train_paths, [state.seed, 1], labels)
    val_data = tan_dataset(cfg, cfg.tan_val_paths, [state.seed, 2], labels)
    return train_data, val_data
