"""Signed distance fields over analytic scenes, collision cost maps and trilinear queries.

Grids store one sample per voxel center; voxel ``(i, j, k)`` sits at
``origin + resolution * (i, j, k)``.  Arrays are indexed ``[i, j, k]`` in memory
and serialized with x varying fastest.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import correlate1d

from .errors import ArgumentError, ResourceError

MAX_VOXELS = 512**3
DEFAULT_RESOLUTION = 0.1
DEFAULT_D_SAFE = 1.0
DEFAULT_SIGMA = 2.0
ROBOT_RADIUS = 0.3
EMPTY_DISTANCE = 1e6
MAGIC = b"ESDF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI3I3dddd")


def _vec(x, n: int = 3) -> NDArray[np.float64]:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size != n or not np.all(np.isfinite(v)):
        raise ArgumentError(f"expected {n} finite numbers, got {x!r}")
    return v


@dataclass(frozen=True)
class Box:
    min: NDArray[np.float64]
    max: NDArray[np.float64]

    def __post_init__(self) -> None:
        lo, hi = _vec(self.min), _vec(self.max)
        if np.any(hi <= lo):
            raise ArgumentError("box max must exceed min on every axis")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def signed_distance(self, p: NDArray[np.float64]) -> NDArray[np.float64]:
        center = 0.5 * (self.min + self.max)
        half = 0.5 * (self.max - self.min)
        q = np.abs(p - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def bbox(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        return self.min, self.max

    def to_json(self) -> dict:
        return {"type": "box", "min": self.min.tolist(), "max": self.max.tolist()}


@dataclass(frozen=True)
class Sphere:
    center: NDArray[np.float64]
    radius: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise ArgumentError("sphere radius must be positive")
        object.__setattr__(self, "center", _vec(self.center))
        object.__setattr__(self, "radius", float(self.radius))

    def signed_distance(self, p: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def bbox(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        return self.center - self.radius, self.center + self.radius

    def to_json(self) -> dict:
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder with axis parallel to z."""

    center_xy: NDArray[np.float64]
    radius: float
    z_range: NDArray[np.float64]

    def __post_init__(self) -> None:
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise ArgumentError("cylinder radius must be positive")
        zr = _vec(self.z_range, 2)
        if zr[1] <= zr[0]:
            raise ArgumentError("cylinder z_range must be increasing")
        object.__setattr__(self, "center_xy", _vec(self.center_xy, 2))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "z_range", zr)

    def signed_distance(self, p: NDArray[np.float64]) -> NDArray[np.float64]:
        radial = np.linalg.norm(p[..., :2] - self.center_xy, axis=-1) - self.radius
        zmid = 0.5 * (self.z_range[0] + self.z_range[1])
        vertical = np.abs(p[..., 2] - zmid) - 0.5 * (self.z_range[1] - self.z_range[0])
        q = np.stack([radial, vertical], axis=-1)
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(np.max(q, axis=-1), 0.0)

    def bbox(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        lo = np.array([*(self.center_xy - self.radius), self.z_range[0]])
        hi = np.array([*(self.center_xy + self.radius), self.z_range[1]])
        return lo, hi

    def to_json(self) -> dict:
        return {
            "type": "cylinder",
            "center_xy": self.center_xy.tolist(),
            "radius": self.radius,
            "z_range": self.z_range.tolist(),
        }


Primitive = Union[Box, Sphere, Cylinder]


@dataclass(frozen=True)
class Scene:
    bounds_min: NDArray[np.float64]
    bounds_max: NDArray[np.float64]
    obstacles: tuple[Primitive, ...] = ()

    def __post_init__(self) -> None:
        lo, hi = _vec(self.bounds_min), _vec(self.bounds_max)
        if np.any(hi <= lo):
            raise ArgumentError("scene bounds are degenerate")
        for ob in self.obstacles:
            blo, bhi = ob.bbox()
            if np.any(bhi < lo) or np.any(blo > hi):
                raise ArgumentError(f"obstacle {ob.to_json()} lies outside the scene bounds")
        object.__setattr__(self, "bounds_min", lo)
        object.__setattr__(self, "bounds_max", hi)
        object.__setattr__(self, "obstacles", tuple(self.obstacles))

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.bounds_min) and np.all(p <= self.bounds_max))

    def signed_distance(self, p: NDArray[np.float64]) -> NDArray[np.float64]:
        """Minimum of the per-primitive signed distances (``inf`` with no obstacles)."""
        p = np.asarray(p, dtype=np.float64)
        out = np.full(p.shape[:-1], np.inf)
        for ob in self.obstacles:
            np.minimum(out, ob.signed_distance(p), out=out)
        return out

    def to_json(self) -> dict:
        return {
            "bounds": {"min": self.bounds_min.tolist(), "max": self.bounds_max.tolist()},
            "obstacles": [ob.to_json() for ob in self.obstacles],
        }


def _parse_obstacle(d: dict) -> Primitive:
    kind = d.get("type")
    try:
        if kind == "box":
            return Box(d["min"], d["max"])
        if kind == "sphere":
            return Sphere(d["center"], float(d["radius"]))
        if kind == "cylinder":
            return Cylinder(d["center_xy"], float(d["radius"]), d["z_range"])
    except KeyError as exc:
        raise ArgumentError(f"obstacle of type {kind!r} is missing field {exc}") from None
    raise ArgumentError(f"unknown obstacle type {kind!r}")


def scene_from_json(data: dict) -> Scene:
    if not isinstance(data, dict) or "bounds" not in data:
        raise ArgumentError("scene JSON needs a 'bounds' object")
    b = data["bounds"]
    try:
        lo, hi = b["min"], b["max"]
    except (KeyError, TypeError):
        raise ArgumentError("bounds must have 'min' and 'max'") from None
    return Scene(lo, hi, tuple(_parse_obstacle(o) for o in data.get("obstacles", [])))


def load_scene(path) -> Scene:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return scene_from_json(data)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_json(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class EsdfGrid:
    origin: NDArray[np.float64]
    resolution: float
    signed_distance: NDArray[np.float64]
    values: NDArray[np.float64] | None = None
    d_safe: float = DEFAULT_D_SAFE
    sigma: float = 0.0

    def __post_init__(self) -> None:
        sd = np.asarray(self.signed_distance, dtype=np.float64)
        if sd.ndim != 3:
            raise ArgumentError("signed_distance must be a 3D array")
        object.__setattr__(self, "origin", _vec(self.origin))
        object.__setattr__(self, "signed_distance", sd)
        if self.values is not None:
            v = np.asarray(self.values, dtype=np.float64)
            if v.shape != sd.shape:
                raise ArgumentError("values and signed_distance shapes differ")
            object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.signed_distance.shape)  # type: ignore[return-value]

    @property
    def upper(self) -> NDArray[np.float64]:
        """Center of the last voxel."""
        return self.origin + self.resolution * (np.asarray(self.dims) - 1)

    def centers(self, axis: int) -> NDArray[np.float64]:
        return self.origin[axis] + self.resolution * np.arange(self.dims[axis])


def grid_dims(scene: Scene, resolution: float) -> tuple[int, int, int]:
    extent = scene.bounds_max - scene.bounds_min
    return tuple(max(1, int(math.ceil(e / resolution - 1e-9))) for e in extent)  # type: ignore[return-value]


def build_sdf(scene: Scene, resolution: float = DEFAULT_RESOLUTION, max_voxels: int = MAX_VOXELS) -> EsdfGrid:
    """Evaluate the scene's signed distance at every voxel center.

    Voxel centers start half a voxel inside ``bounds_min``.  Distances are
    capped at ``EMPTY_DISTANCE``, a finite stand-in for infinity in empty scenes.
    """
    if not (math.isfinite(resolution) and resolution > 0):
        raise ArgumentError("resolution must be positive")
    dims = grid_dims(scene, resolution)
    n = dims[0] * dims[1] * dims[2]
    if n > max_voxels:
        raise ResourceError(f"grid {dims} has {n} voxels, cap is {max_voxels}")
    origin = scene.bounds_min + 0.5 * resolution
    xs = [origin[a] + resolution * np.arange(dims[a]) for a in range(3)]
    sd = np.empty(dims)
    X, Y = np.meshgrid(xs[0], xs[1], indexing="ij")
    for k, z in enumerate(xs[2]):  # z slabs bound peak memory
        pts = np.stack([X, Y, np.full_like(X, z)], axis=-1)
        sd[:, :, k] = np.minimum(scene.signed_distance(pts), EMPTY_DISTANCE)
    return EsdfGrid(origin=origin, resolution=float(resolution), signed_distance=sd)


def gaussian_kernel(sigma: float) -> NDArray[np.float64]:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(field: NDArray[np.float64], sigma: float) -> NDArray[np.float64]:
    """Separable Gaussian truncated at 3 sigma; weights falling outside the grid are dropped and the rest renormalized."""
    if sigma <= 0:
        return np.array(field, dtype=np.float64)
    k = gaussian_kernel(sigma)
    out = np.asarray(field, dtype=np.float64)
    for axis in range(out.ndim):
        ones = np.ones(out.shape[axis])
        norm = correlate1d(ones, k, mode="constant", cval=0.0)
        shape = [1] * out.ndim
        shape[axis] = -1
        out = correlate1d(out, k, axis=axis, mode="constant", cval=0.0) / norm.reshape(shape)
    return out


def sdf_to_cost(
    grid: EsdfGrid,
    d_safe: float = DEFAULT_D_SAFE,
    sigma: float = DEFAULT_SIGMA,
    exponential: bool = False,
) -> EsdfGrid:
    """Return a copy of ``grid`` with ``values`` set to the smoothed collision cost.

    The linear cost is ``max(0, d_safe - sd)``; ``exponential=True`` uses
    ``exp(-sd / d_safe)`` instead.  ``sigma`` is in voxels.
    """
    if not (math.isfinite(d_safe) and d_safe > 0):
        raise ArgumentError("d_safe must be positive")
    if not (math.isfinite(sigma) and sigma >= 0):
        raise ArgumentError("sigma must be non-negative")
    sd = grid.signed_distance
    raw = np.exp(-sd / d_safe) if exponential else np.maximum(0.0, d_safe - sd)
    return replace(grid, values=gaussian_smooth(raw, sigma), d_safe=float(d_safe), sigma=float(sigma))


@dataclass(frozen=True)
class CostSample:
    cost: float
    gradient: NDArray[np.float64]
    clamped: bool = False


def _trilinear(field: NDArray[np.float64], grid: EsdfGrid, pts: NDArray[np.float64]):
    u = (pts - grid.origin) / grid.resolution
    dims = np.asarray(grid.dims)
    hi = (dims - 1).astype(np.float64)
    clamped_axes = (u < 0.0) | (u > hi)
    u = np.clip(u, 0.0, hi)
    i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
    f = u - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    corners = {}
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                ix = i1[:, 0] if a else i0[:, 0]
                iy = i1[:, 1] if b else i0[:, 1]
                iz = i1[:, 2] if c else i0[:, 2]
                corners[a, b, c] = field[ix, iy, iz]
    wx = (1 - fx, fx)
    wy = (1 - fy, fy)
    wz = (1 - fz, fz)
    dwx = (-np.ones_like(fx), np.ones_like(fx))
    val = np.zeros(len(pts))
    grad = np.zeros((len(pts), 3))
    for (a, b, c), v in corners.items():
        val += wx[a] * wy[b] * wz[c] * v
        grad[:, 0] += dwx[a] * wy[b] * wz[c] * v
        grad[:, 1] += wx[a] * dwx[b] * wz[c] * v
        grad[:, 2] += wx[a] * wy[b] * dwx[c] * v
    grad /= grid.resolution
    # flat along clamped or single-voxel axes
    grad[clamped_axes | (dims == 1)[None, :]] = 0.0
    return val, grad, clamped_axes.any(axis=1)


def _points(pts) -> NDArray[np.float64]:
    p = np.asarray(pts, dtype=np.float64)
    if p.ndim == 1:
        p = p.reshape(1, -1)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ArgumentError("query points must have shape [N, 3]")
    if np.isnan(p).any():
        raise ArgumentError("query point contains NaN")
    return p


def query_many(grid: EsdfGrid, pts, field: str = "values"):
    """Batch trilinear query; returns ``(values [N], gradients [N, 3], clamped [N])``."""
    data = grid.values if field == "values" else grid.signed_distance
    if data is None:
        raise ArgumentError("grid has no cost values; run sdf_to_cost first")
    return _trilinear(data, grid, _points(pts))


def query(grid: EsdfGrid, p, field: str = "values") -> CostSample:
    v, g, c = query_many(grid, p, field)
    return CostSample(float(v[0]), g[0], bool(c[0]))


@dataclass(frozen=True)
class CollisionReport:
    collision: bool
    worst_sd: float
    worst_index: int = field(default=-1)


def collision_check(grid: EsdfGrid, samples, margin: float = ROBOT_RADIUS) -> CollisionReport:
    pts = _points(samples)
    if pts.shape[0] == 0:
        raise ArgumentError("collision_check needs at least one sample")
    sd, _, _ = _trilinear(grid.signed_distance, grid, pts)
    i = int(np.argmin(sd))
    return CollisionReport(bool(sd[i] < margin), float(sd[i]), i)


def save_grid(grid: EsdfGrid, path) -> None:
    values = grid.values if grid.values is not None else np.zeros(grid.dims)
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, *grid.dims, *grid.origin, grid.resolution, grid.d_safe, grid.sigma
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(values, dtype="<f4").tobytes(order="F"))
        fh.write(np.asarray(grid.signed_distance, dtype="<f4").tobytes(order="F"))


def load_grid(path) -> EsdfGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ArgumentError(f"{path}: truncated ESDF header")
    magic, version, nx, ny, nz, ox, oy, oz, res, d_safe, sigma = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ArgumentError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ArgumentError(f"{path}: unsupported ESDF version {version}")
    n = nx * ny * nz
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if body.size != 2 * n:
        raise ArgumentError(f"{path}: expected {2 * n} floats, found {body.size}")
    values = body[:n].reshape((nx, ny, nz), order="F").astype(np.float64)
    sd = body[n:].reshape((nx, ny, nz), order="F").astype(np.float64)
    return EsdfGrid((ox, oy, oz), res, sd, values, d_safe, sigma)


def write_slice_csv(grid: EsdfGrid, height: float, path, field: str = "values") -> int:
    """Dump the voxel layer nearest ``height`` as a CSV matrix (rows: y index, columns: x index)."""
    data = grid.values if field == "values" else grid.signed_distance
    if data is None:
        raise ArgumentError("grid has no cost values")
    k = int(round((height - grid.origin[2]) / grid.resolution))
    k = min(max(k, 0), grid.dims[2] - 1)
    layer = data[:, :, k].T
    lines = [",".join(f"{v:.9g}" for v in row) for row in layer]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return k


def single_pillar_scene(radius: float = 0.5, height: float = 3.0) -> Scene:
    """A 10 x 6 x 3 m room with one vertical pillar in the middle."""
    return Scene(
        (0.0, -3.0, 0.0),
        (10.0, 3.0, height),
        (Cylinder((5.0, 0.0), radius, (0.0, height)),),
    )


def forest_scene(rng: np.random.Generator, n_trees: int = 12, size: float = 12.0, height: float = 4.0) -> Scene:
    """Random vertical trunks plus a few floating spheres for altitude-dependent slices."""
    obstacles: list[Primitive] = []
    for _ in range(n_trees):
        c = rng.uniform(1.0, size - 1.0, 2)
        obstacles.append(Cylinder(c, float(rng.uniform(0.2, 0.5)), (0.0, float(rng.uniform(1.5, height)))))
    for _ in range(max(1, n_trees // 4)):
        c = np.array([*rng.uniform(1.0, size - 1.0, 2), rng.uniform(2.0, height - 0.5)])
        obstacles.append(Sphere(c, float(rng.uniform(0.3, 0.8))))
    return Scene((0.0, 0.0, 0.0), (size, size, height), tuple(obstacles))


def random_scene(
    rng: np.random.Generator,
    n_primitives: int,
    bounds_min=(-1.6, -1.6, -1.6),
    bounds_max=(1.6, 1.6, 1.6),
) -> Scene:
    lo, hi = np.asarray(bounds_min, float), np.asarray(bounds_max, float)
    span = hi - lo
    obstacles: list[Primitive] = []
    for _ in range(n_primitives):
        kind = int(rng.integers(3))
        c = lo + span * rng.uniform(0.25, 0.75, 3)
        s = float(span.min())
        if kind == 0:
            half = s * rng.uniform(0.05, 0.2, 3)
            obstacles.append(Box(c - half, c + half))
        elif kind == 1:
            obstacles.append(Sphere(c, s * float(rng.uniform(0.05, 0.2))))
        else:
            hz = s * float(rng.uniform(0.1, 0.3))
            obstacles.append(Cylinder(c[:2], s * float(rng.uniform(0.05, 0.15)), (c[2] - hz, c[2] + hz)))
    return Scene(lo, hi, tuple(obstacles))
