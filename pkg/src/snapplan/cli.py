"""Command-line interface: ``snapplan {esdf,plan,train,eval-timealloc,eval-grad}``.

Exit codes: 0 success, 2 input error, 3 resource error, 4 solver failure,
5 training divergence.  Every output except the ``latency*`` files is a
deterministic function of the flags and ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cost_map import (
    DEFAULT_D_SAFE,
    DEFAULT_RESOLUTION,
    DEFAULT_SIGMA,
    ROBOT_RADIUS,
    EsdfGrid,
    build_sdf,
    collision_check,
    load_grid,
    load_scene,
    save_grid,
    sdf_to_cost,
    write_slice_csv,
)
from .errors import ArgumentError, DomainError, ResourceError, SolverFailure, TrainingDivergence
from .gradcheck import SUITES
from .minsnap_qp import CorridorSpec, chord_deviation, solve_min_snap
from .nn.bilevel import (
    METRIC_FIELDS,
    LabelCache,
    SceneItem,
    TrainConfig,
    chord_points,
    forward_planner,
    init_state,
    load_checkpoint,
    make_planner_input,
    save_checkpoint,
    tan_datasets,
    tan_mse,
    train,
    train_tan,
)
from .piecewise_poly import evaluate, sample_uniform, snap_integral, write_csv
from .qp_solver import OPTIMAL, kkt_residuals, kkt_satisfied
from .time_alloc import (
    allocate_accel_decel,
    allocate_gradient_descent,
    allocate_learned,
    allocate_uniform,
    random_path,
    total_time,
)

log = logging.getLogger("snapplan")

EXIT_OK, EXIT_INPUT, EXIT_RESOURCE, EXIT_SOLVER, EXIT_DIVERGED = 0, 2, 3, 4, 5
KKT_TOL = 1e-8
EVAL_STRATEGIES = ("uniform", "uniform_equal", "accel5", "gd", "learned")
MIN_EVAL_PATHS = 50


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    if not args.out:
        raise ArgumentError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _vec3(text: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}") from None
    if v.size != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return v


# ---- esdf ----------------------------------------------------------------------


def cmd_esdf(args) -> int:
    scene = load_scene(args.scene)
    grid = sdf_to_cost(build_sdf(scene, args.resolution), args.d_safe, args.sigma, args.exponential)
    if not args.out:
        raise ArgumentError("--out is required")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(grid, out)
    for h in args.slices or []:
        write_slice_csv(grid, h, out.with_name(f"{out.stem}_slice_z{h:g}.csv"))
    print(f"wrote {out} dims={grid.dims} max_cost={float(grid.values.max()):.6g}")
    return EXIT_OK


# ---- plan ----------------------------------------------------------------------


def _load_map(args) -> tuple[EsdfGrid | None, np.ndarray | None, np.ndarray | None]:
    if args.grid:
        grid = load_grid(args.grid)
        half = 0.5 * grid.resolution
        return grid, grid.origin - half, grid.upper + half
    if args.scene:
        scene = load_scene(args.scene)
        grid = sdf_to_cost(build_sdf(scene, args.resolution), args.d_safe, args.sigma)
        return grid, scene.bounds_min, scene.bounds_max
    return None, None, None


def cmd_plan(args) -> int:
    out = _out_dir(args)
    start, goal = np.asarray(args.start, float), np.asarray(args.goal, float)
    grid, lo, hi = _load_map(args)
    if lo is not None:
        for name, p in (("start", start), ("goal", goal)):
            if np.any(p < lo) or np.any(p > hi):
                raise DomainError(f"{name} {p.tolist()} lies outside the map bounds {lo.tolist()} .. {hi.tolist()}")
    state = load_checkpoint(args.checkpoint) if args.checkpoint else None
    t0 = time.perf_counter()
    eta = None
    if args.planner == "network":
        if state is None or grid is None:
            raise ArgumentError("--planner network needs --checkpoint and a map (--scene or --grid)")
        xi, eta = forward_planner(state, make_planner_input(grid, start, goal, state.layout), start, goal)
    elif args.via:
        xi = np.vstack([start, *args.via, goal])
    else:
        xi = chord_points(start, goal, args.keypoints)
    T = total_time(xi, args.v_nominal)
    strategy = args.time_alloc
    if strategy == "uniform":
        alloc = allocate_uniform(xi, T, equal=args.uniform_equal)
    elif strategy == "accel5":
        alloc = allocate_accel_decel(xi, args.v_nominal, args.a_max)
    elif strategy == "gd":
        alloc = allocate_gradient_descent(xi, None, T)
    else:
        if state is None:
            raise ArgumentError("--time-alloc learned needs --checkpoint")
        alloc = allocate_learned(xi, T, state.tan)
    corridor = CorridorSpec(args.corridor, mode=args.corridor_mode) if args.corridor else None
    poly, sol, problem = solve_min_snap(xi, alloc.durations, corridor=corridor)
    latency_ms = 1e3 * (time.perf_counter() - t0)
    residuals = kkt_residuals(problem, sol)
    ok = sol.status == OPTIMAL and kkt_satisfied(problem, sol, KKT_TOL)
    summary = {
        "start": start.tolist(),
        "goal": goal.tolist(),
        "planner": args.planner,
        "time_alloc": strategy + ("_equal" if strategy == "uniform" and args.uniform_equal else ""),
        "keypoints": xi.tolist(),
        "durations": alloc.durations.tolist(),
        "allocation_status": alloc.status,
        "qp_status": sol.status,
        "qp_iterations": sol.iterations,
        "kkt_residuals": residuals,
        "kkt_tolerance": KKT_TOL,
        "kkt_ok": ok,
        "control_effort": snap_integral(poly),
        "eta": eta,
        "executed": bool(eta is None or eta < 0.5),
    }
    if corridor is not None:
        dev = np.abs(chord_deviation(poly, xi, corridor))
        summary["corridor"] = {
            "half_width": corridor.half_width,
            "mode": corridor.mode,
            "max_chord_deviation": float(dev.max()),
            "max_row_violation": float(np.max(problem.G @ sol.c - problem.h, initial=-np.inf)),
        }
    if grid is not None and ok:
        pts = np.array([s.position for s in sample_uniform(poly, args.rate)])
        rep = collision_check(grid, pts, ROBOT_RADIUS)
        summary["collision"] = {"collision": rep.collision, "worst_sd": rep.worst_sd, "margin": ROBOT_RADIUS}
    if ok:
        write_csv(poly, args.rate, out / "trajectory.csv")
    _write_json(out / "summary.json", summary)
    _write_json(out / "latency.json", {"plan_ms": latency_ms})
    if not ok:
        print(f"solver failure: status={sol.status} residuals={residuals}", file=sys.stderr)
        return EXIT_SOLVER
    print(f"effort={summary['control_effort']:.6g} executed={summary['executed']} -> {out}")
    return EXIT_OK


# ---- train ---------------------------------------------------------------------


def _load_scenes(directory: Path, cfg_resolution: float) -> list[SceneItem]:
    items = []
    for path in sorted(directory.glob("*.json")):
        scene = load_scene(path)
        grid_path = path.with_suffix(".esdf")
        if grid_path.exists():
            grid = load_grid(grid_path)
        else:
            grid = sdf_to_cost(build_sdf(scene, cfg_resolution))
        items.append(SceneItem(scene, grid))
    if not items:
        raise ArgumentError(f"no scene JSON files in {directory}")
    return items


def _write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_train(args) -> int:
    out = _out_dir(args)
    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        cfg = TrainConfig.from_dict(args.config_data or {})
        state = init_state(cfg, args.seed)
    cfg = state.config
    steps = args.steps if args.steps is not None else cfg.steps
    try:
        if cfg.mode == "tan":
            train_data, val_data = tan_datasets(state, LabelCache(cfg.v_nominal))
            rows = train_tan(state, train_data, val_data, epochs=steps if args.steps is not None else None)
            fields = ("step", "train_mse", "val_mse")
            _write_json(out / "tan_eval.json", {"val_mse": tan_mse(state.tan, val_data), "val_paths": len(val_data.paths)})
        else:
            if not args.scenes:
                raise ArgumentError("bilevel training needs --scenes DIR")
            rows = train(state, _load_scenes(Path(args.scenes), DEFAULT_RESOLUTION), steps)
            fields = METRIC_FIELDS
    except TrainingDivergence as exc:
        (out / "divergence.txt").write_text(str(exc) + "\n", encoding="utf-8")
        raise
    save_checkpoint(state, out / "checkpoint.json")
    _write_csv(out / "metrics.csv", fields, rows)
    print(f"trained to step {state.step} -> {out}")
    return EXIT_OK


# ---- eval-timealloc ------------------------------------------------------------


def _eval_paths(args) -> list[np.ndarray]:
    if args.paths:
        try:
            data = json.loads(Path(args.paths).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"{args.paths}: malformed JSON at line {exc.lineno}, column {exc.colno}") from None
        paths = [np.asarray(p, dtype=np.float64) for p in data]
    else:
        rng = np.random.default_rng(args.seed)
        paths = [random_path(rng, args.n_keypoints, (args.chord_min, args.chord_max)) for _ in range(args.n_paths)]
    if len(paths) < MIN_EVAL_PATHS:
        raise ArgumentError(f"need at least {MIN_EVAL_PATHS} evaluation paths, got {len(paths)}")
    return paths


def _allocate(strategy: str, xi, T: float, v_nominal: float, a_max: float, tan):
    if strategy == "uniform":
        return allocate_uniform(xi, T)
    if strategy == "uniform_equal":
        return allocate_uniform(xi, T, equal=True)
    if strategy == "accel5":
        return allocate_accel_decel(xi, v_nominal, a_max)
    if strategy == "gd":
        return allocate_gradient_descent(xi, None, T)
    return allocate_learned(xi, T, tan)


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"n": 0, "mean": None, "std": None, "median": None}
    return {"n": int(v.size), "mean": float(v.mean()), "std": float(v.std()), "median": float(np.median(v))}


def _eval_path(task) -> tuple[list[dict], list[dict]]:
    """All strategies on one path; returns run rows and latency rows."""
    i, xi, strategies, v_nominal, a_max, tan = task
    T = total_time(xi, v_nominal)
    runs, lat = [], []
    for s in strategies:
        t0 = time.perf_counter()
        effort, goal_distance, status = float("nan"), float("nan"), "failed"
        try:
            alloc = _allocate(s, xi, T, v_nominal, a_max, tan)
            poly, sol, _ = solve_min_snap(xi, alloc.durations)
            if sol.status == OPTIMAL and alloc.status == "ok":
                effort = snap_integral(poly)
                goal_distance = float(np.linalg.norm(evaluate(poly, poly.total_time, 0).position - xi[-1]))
                status = "ok"
        except (ArgumentError, SolverFailure) as exc:
            log.warning("path %d strategy %s failed: %s", i, s, exc)
        lat.append({"path": i, "strategy": s, "latency_ms": 1e3 * (time.perf_counter() - t0)})
        runs.append({"path": i, "strategy": s, "status": status, "effort": effort, "goal_distance": goal_distance})
    return runs, lat


def cmd_eval_timealloc(args) -> int:
    out = _out_dir(args)
    paths = _eval_paths(args)
    tan = load_checkpoint(args.checkpoint).tan if args.checkpoint else None
    strategies = [s for s in EVAL_STRATEGIES if s != "learned" or tan is not None]
    tasks = [(i, xi, strategies, args.v_nominal, args.a_max, tan) for i, xi in enumerate(paths)]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_eval_path, tasks))
    else:
        results = [_eval_path(t) for t in tasks]
    runs = [r for rows, _ in results for r in rows]
    lat = [r for _, rows in results for r in rows]
    summary = {"n_paths": len(paths), "strategies": {}}
    ok_by = {s: {r["path"]: r["effort"] for r in runs if r["strategy"] == s and r["status"] == "ok"} for s in strategies}
    for s in strategies:
        summary["strategies"][s] = {**_stats(list(ok_by[s].values())), "failed": len(paths) - len(ok_by[s])}
    common = sorted(set.intersection(*(set(v) for v in ok_by.values())))
    gd = np.array([ok_by["gd"][i] for i in common])
    ueq = np.array([ok_by["uniform_equal"][i] for i in common])
    props = {
        "paired_paths": len(common),
        "gd_le_uniform_equal": float(np.mean(gd <= ueq)) if common else None,
        "gd_lt_uniform_equal": float(np.mean(gd < ueq)) if common else None,
        "median_uniform_equal_over_gd": float(np.median(ueq / gd)) if common else None,
    }
    means = {s: summary["strategies"][s]["mean"] for s in strategies}
    props["uniform_equal_mean_exceeds_others"] = all(
        means["uniform_equal"] > means[s] for s in strategies if s not in ("uniform_equal", "uniform")
    )
    if tan is not None:
        props["learned_over_gd_mean"] = means["learned"] / means["gd"]
    summary["properties"] = props
    _write_csv(out / "runs.csv", ("path", "strategy", "status", "effort", "goal_distance"), runs)
    _write_json(out / "summary.json", summary)
    _write_csv(out / "latency.csv", ("path", "strategy", "latency_ms"), lat)
    lat_summary = {s: _stats([r["latency_ms"] for r in lat if r["strategy"] == s]) for s in strategies}
    if tan is not None:
        lat_summary["learned_over_gd_mean"] = lat_summary["learned"]["mean"] / lat_summary["gd"]["mean"]
    _write_json(out / "latency_summary.json", lat_summary)
    for s in strategies:
        st = summary["strategies"][s]
        print(f"{s:14s} n={st['n']:4d} mean_effort={st['mean']} failed={st['failed']}")
    return EXIT_OK


# ---- eval-grad -----------------------------------------------------------------


def cmd_eval_grad(args) -> int:
    names = args.suites or list(SUITES)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise ArgumentError(f"unknown suites {sorted(unknown)}; choose from {sorted(SUITES)}")
    report = {}
    for name in names:
        res = SUITES[name](seed=args.seed)
        report[name] = {"max_rel_error": res.max_rel_error, "tolerance": res.tolerance, "passed": res.passed}
        print(f"{name:18s} max_rel_error={res.max_rel_error:.3e} tol={res.tolerance:.0e} {'PASS' if res.passed else 'FAIL'}")
    if args.out:
        _write_json(_out_dir(args) / "grad_report.json", report)
    return EXIT_OK if all(r["passed"] for r in report.values()) else EXIT_SOLVER


# ---- parser --------------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0, help="random seed")
    p.add_argument("--config", default=d, help="JSON config file")
    p.add_argument("--out", default=d, help="output path (file for esdf, directory otherwise)")
    p.add_argument("--log-level", default=argparse.SUPPRESS if suppress else "WARNING")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snapplan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"snapplan {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = add("esdf", cmd_esdf, "build a cost map from a scene JSON")
    p.add_argument("scene")
    p.add_argument("--resolution", type=float, default=DEFAULT_RESOLUTION)
    p.add_argument("--d-safe", type=float, default=DEFAULT_D_SAFE)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help="smoothing std in voxels")
    p.add_argument("--exponential", action="store_true", help="exp(-sd/d_safe) cost instead of the clamped linear one")
    p.add_argument("--slices", type=float, nargs="*", help="heights (m) of CSV slice dumps")

    p = add("plan", cmd_plan, "plan one trajectory")
    p.add_argument("--start", type=_vec3, required=True, help="x,y,z")
    p.add_argument("--goal", type=_vec3, required=True, help="x,y,z")
    m = p.add_mutually_exclusive_group()
    m.add_argument("--scene")
    m.add_argument("--grid")
    p.add_argument("--resolution", type=float, default=DEFAULT_RESOLUTION)
    p.add_argument("--d-safe", type=float, default=DEFAULT_D_SAFE)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--planner", choices=("chord", "network"), default="chord")
    p.add_argument("--keypoints", type=int, default=2, help="chord planner key points")
    p.add_argument("--via", type=_vec3, action="append", help="intermediate key point x,y,z (repeatable)")
    p.add_argument("--time-alloc", choices=("uniform", "accel5", "gd", "learned"), default="uniform")
    p.add_argument("--uniform-equal", action="store_true", help="equal durations for the uniform strategy")
    p.add_argument("--corridor", type=float, help="corridor half width l_c (m)")
    p.add_argument("--corridor-mode", choices=("perpendicular", "timed"), default="perpendicular")
    p.add_argument("--checkpoint")
    p.add_argument("--v-nominal", type=float, default=2.0)
    p.add_argument("--a-max", type=float, default=5.0)
    p.add_argument("--rate", type=float, default=50.0, help="CSV sample rate (Hz)")

    p = add("train", cmd_train, "bi-level or allocation-network training")
    p.add_argument("--scenes", help="directory of scene JSON files (optional <stem>.esdf grids)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="override the configured number of steps/epochs")

    p = add("eval-timealloc", cmd_eval_timealloc, "compare time-allocation strategies")
    p.add_argument("--paths", help="JSON list of key-point paths")
    p.add_argument("--n-paths", type=int, default=100)
    p.add_argument("--n-keypoints", type=int, default=5)
    p.add_argument("--chord-min", type=float, default=0.1)
    p.add_argument("--chord-max", type=float, default=10.0)
    p.add_argument("--checkpoint", help="checkpoint providing the allocation network")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--v-nominal", type=float, default=2.0)
    p.add_argument("--a-max", type=float, default=5.0)

    p = add("eval-grad", cmd_eval_grad, "finite-difference gradient suites")
    p.add_argument("--suites", nargs="*", help=f"subset of {sorted(SUITES)}")
    return parser


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv) -> argparse.Namespace:
    """Config keys become defaults for the chosen subcommand; explicit flags still win."""
    args.config_data = None
    if not args.config:
        return args
    path = Path(args.config)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ArgumentError(f"{path}: config must be a JSON object")
    args.config_data = data
    if args.command == "train":
        return args
    sub = next(a for a in parser._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
    sp = sub.choices[args.command]
    known = {a.dest for a in sp._actions}
    unknown = set(k.replace("-", "_") for k in data) - known
    if unknown:
        raise ArgumentError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    sp.set_defaults(**{k.replace("-", "_"): v for k, v in data.items()})
    new = parser.parse_args(argv)
    new.config_data = data
    return new


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config(parser, args, argv)
        return args.func(args)
    except (ArgumentError, DomainError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ResourceError as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    raise SystemExit(main())
