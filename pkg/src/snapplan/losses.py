"""Upper-level training loss terms with analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .cost_map import EsdfGrid, query_many
from .errors import ArgumentError

ETA_CLAMP = 1e-6
TERMS = ("obstacle", "target", "smoothness", "escape", "time_alloc")


@dataclass(frozen=True)
class LossWeights:
    obstacle: float = 1.0
    target: float = 2.0
    smoothness: float = 0.5
    escape: float = 1.0
    time_alloc: float = 1.0

    def __post_init__(self) -> None:
        for name in TERMS:
            w = getattr(self, name)
            if not (math.isfinite(w) and w >= 0):
                raise ArgumentError(f"loss weight {name} must be finite and non-negative")

    def as_array(self) -> NDArray[np.float64]:
        return np.array([getattr(self, n) for n in TERMS])

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - set(TERMS)
        if unknown:
            raise ArgumentError(f"unknown loss weights {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {n: getattr(self, n) for n in TERMS}


def obstacle_cost(samples, grid: EsdfGrid) -> tuple[float, NDArray[np.float64], int]:
    """Summed map cost over samples; returns (cost, per-sample gradients, number clamped)."""
    pts = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    v, g, clamped = query_many(grid, pts)
    return float(np.sum(v)), g, int(np.count_nonzero(clamped))


def target_cost(final_point, goal) -> tuple[float, NDArray[np.float64]]:
    d = np.asarray(final_point, dtype=np.float64) - np.asarray(goal, dtype=np.float64)
    n = float(np.linalg.norm(d))
    if n == 0.0:
        return 0.0, np.zeros(3)
    return n, d / n


def reference_points(start, goal, n: int) -> NDArray[np.float64]:
    s = np.asarray(start, dtype=np.float64)
    g = np.asarray(goal, dtype=np.float64)
    f = np.linspace(0.0, 1.0, n)[:, None]
    return s + f * (g - s)


def smoothness_cost(waypoints, start, goal) -> tuple[float, NDArray[np.float64]]:
    """Sum of |segment length - reference segment length| with reference points evenly spaced from start to goal."""
    p = np.asarray(waypoints, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2 or p.shape[1] != 3:
        raise ArgumentError("smoothness_cost needs at least two 3D waypoints")
    ref = reference_points(start, goal, p.shape[0])
    d = np.diff(p, axis=0)
    lengths = np.linalg.norm(d, axis=1)
    ref_lengths = np.linalg.norm(np.diff(ref, axis=0), axis=1)
    gap = lengths - ref_lengths
    sign = np.sign(gap)  # subgradient 0 at ties
    unit = np.divide(d, lengths[:, None], out=np.zeros_like(d), where=lengths[:, None] > 0)
    seg_grad = sign[:, None] * unit
    grad = np.zeros_like(p)
    grad[1:] += seg_grad
    grad[:-1] -= seg_grad
    return float(np.sum(np.abs(gap))), grad


def escape_cost(eta: float, collided: bool) -> tuple[float, float]:
    """Binary cross entropy of the collision probability against the collision label."""
    e = min(max(float(eta), ETA_CLAMP), 1.0 - ETA_CLAMP)
    clamped = e != float(eta)
    if collided:
        loss, grad = -math.log(e), -1.0 / e
    else:
        loss, grad = -math.log1p(-e), 1.0 / (1.0 - e)
    return loss, 0.0 if clamped else grad


def time_alloc_cost(predicted, reference) -> tuple[float, NDArray[np.float64]]:
    g = np.asarray(predicted, dtype=np.float64).reshape(-1)
    t = np.asarray(reference, dtype=np.float64).reshape(-1)
    if g.shape != t.shape:
        raise ArgumentError(f"fraction vectors differ in length: {g.size} vs {t.size}")
    r = g - t
    return float(np.mean(r**2)), 2.0 * r / g.size


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    terms: dict
    grad_samples: NDArray[np.float64]
    grad_final: NDArray[np.float64]
    grad_waypoints: NDArray[np.float64]
    grad_eta: float
    grad_fractions: NDArray[np.float64]
    clamped_samples: int = 0

    @property
    def grad_samples_total(self) -> NDArray[np.float64]:
        """Gradient w.r.t. samples with the target term folded onto the last sample."""
        g = self.grad_samples.copy()
        g[-1] += self.grad_final
        return g


def total_loss(
    weights: LossWeights,
    samples,
    grid: EsdfGrid | None,
    goal,
    waypoints,
    start,
    eta: float,
    collided: bool,
    fractions=None,
    reference_fractions=None,
) -> LossBreakdown:
    """Weighted sum of the five terms in the fixed order of ``TERMS``.

    Terms with zero weight are still reported; their gradients are scaled by
    the weight so a zero weight contributes exactly nothing.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    if samples.shape[0] == 0:
        raise ArgumentError("total_loss needs at least one trajectory sample")
    w = weights
    if grid is not None:
        uo, go, n_clamped = obstacle_cost(samples, grid)
    else:
        uo, go, n_clamped = 0.0, np.zeros_like(samples), 0
    ug, gg = target_cost(samples[-1], goal)
    us, gs = smoothness_cost(waypoints, start, goal)
    ue, ge = escape_cost(eta, collided)
    if fractions is not None and reference_fractions is not None:
        ut, gt = time_alloc_cost(fractions, reference_fractions)
    else:
        ut = 0.0
        gt = np.zeros(0) if fractions is None else np.zeros(np.size(fractions))
    terms = {"obstacle": uo, "target": ug, "smoothness": us, "escape": ue, "time_alloc": ut}
    total = 0.0
    for name in TERMS:
        total += getattr(w, name) * terms[name]
    return LossBreakdown(
        total=total,
        terms=terms,
        grad_samples=w.obstacle * go,
        grad_final=w.target * gg,
        grad_waypoints=w.smoothness * gs,
        grad_eta=w.escape * ge,
        grad_fractions=w.time_alloc * gt,
        clamped_samples=n_clamped,
    )
