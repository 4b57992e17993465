"""Piecewise polynomial flat-output trajectories in local-time monomial form.

Segment ``i`` stores coefficients ``c[i, axis, k]`` so that on its local time
``s in [0, tau_i]`` the axis value is ``sum_k c[i, axis, k] * s**k``.
Axes 0..2 are position; axis 3, when present, is yaw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray

from .errors import ArgumentError, DomainError

DEFAULT_DEGREE = 7
CSV_HEADER = "t,x,y,z,yaw,vx,vy,vz,ax,ay,az,jx,jy,jz,sx,sy,sz"


@lru_cache(maxsize=None)
def _falling(m: int, r: int) -> tuple[float, ...]:
    """k!/(k-r)! for k = 0..m (zero where k < r)."""
    return tuple(
        float(math.factorial(k) // math.factorial(k - r)) if k >= r else 0.0
        for k in range(m + 1)
    )


def basis_row(t: float, order: int, degree: int = DEFAULT_DEGREE) -> NDArray[np.float64]:
    """Row vector of d^order/dt^order [1, t, ..., t^degree] evaluated at ``t``."""
    fall = _falling(degree, order)
    row = np.zeros(degree + 1)
    for k in range(order, degree + 1):
        row[k] = fall[k] * t ** (k - order)
    return row


def basis_row_dt(t: float, order: int, degree: int = DEFAULT_DEGREE) -> NDArray[np.float64]:
    """Derivative of :func:`basis_row` with respect to ``t``."""
    return basis_row(t, order + 1, degree)


def basis_matrix(ts: NDArray[np.float64], order: int, degree: int = DEFAULT_DEGREE) -> NDArray[np.float64]:
    """Stack of :func:`basis_row` for many times, shape ``[len(ts), degree+1]``."""
    ts = np.asarray(ts, dtype=np.float64)
    fall = np.asarray(_falling(degree, order))
    powers = np.arange(degree + 1) - order
    out = np.zeros((ts.size, degree + 1))
    mask = powers >= 0
    out[:, mask] = fall[mask] * ts[:, None] ** powers[mask]
    return out


def gram(tau: float, order: int, degree: int = DEFAULT_DEGREE) -> NDArray[np.float64]:
    """Gram matrix int_0^tau D^r Omega D^r Omega^T ds in closed form."""
    fall = np.asarray(_falling(degree, order))
    n = degree + 1
    G = np.zeros((n, n))
    for j in range(order, n):
        for k in range(order, n):
            p = j + k - 2 * order + 1
            G[j, k] = fall[j] * fall[k] * tau**p / p
    return G


def gram_dtau(tau: float, order: int, degree: int = DEFAULT_DEGREE) -> NDArray[np.float64]:
    """d/dtau of :func:`gram`."""
    fall = np.asarray(_falling(degree, order))
    n = degree + 1
    G = np.zeros((n, n))
    for j in range(order, n):
        for k in range(order, n):
            p = j + k - 2 * order
            G[j, k] = fall[j] * fall[k] * tau**p
    return G


@dataclass(frozen=True)
class PiecewisePolynomial:
    coeffs: NDArray[np.float64]
    segment_durations: NDArray[np.float64]
    degree: int = DEFAULT_DEGREE
    knot_times: NDArray[np.float64] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        coeffs = np.array(self.coeffs, dtype=np.float64)
        durations = np.array(self.segment_durations, dtype=np.float64).reshape(-1)
        if coeffs.ndim != 3:
            raise ArgumentError("coeffs must have shape [n_segments, n_axes, degree+1]")
        if coeffs.shape[0] != durations.size:
            raise ArgumentError(
                f"{coeffs.shape[0]} coefficient segments but {durations.size} durations"
            )
        if coeffs.shape[2] != self.degree + 1:
            raise ArgumentError(f"expected {self.degree + 1} coefficients per axis")
        if coeffs.shape[1] not in (3, 4):
            raise ArgumentError("n_axes must be 3 (position) or 4 (position + yaw)")
        if not np.all(np.isfinite(durations)) or np.any(durations <= 0.0):
            raise ArgumentError("segment durations must be finite and strictly positive")
        coeffs.setflags(write=False)
        durations.setflags(write=False)
        knots = np.concatenate([[0.0], np.cumsum(durations)])
        knots.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "segment_durations", durations)
        object.__setattr__(self, "knot_times", knots)

    @property
    def n_segments(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_axes(self) -> int:
        return self.coeffs.shape[1]

    @property
    def total_time(self) -> float:
        return float(self.knot_times[-1])

    def locate(self, t: float) -> tuple[int, float]:
        """Segment index and local time for global ``t``; knots resolve to the left segment."""
        T = self.total_time
        if not np.isfinite(t) or t < -1e-12 * max(1.0, T) or t > T * (1.0 + 1e-12):
            raise DomainError(f"t={t!r} outside [0, {T}]")
        t = min(max(t, 0.0), T)
        i = int(np.searchsorted(self.knot_times, t, side="left")) - 1
        i = min(max(i, 0), self.n_segments - 1)
        return i, t - float(self.knot_times[i])


@dataclass(frozen=True)
class TrajectorySample:
    """Flat-output state at one instant.

    ``derivatives[k-1]`` holds the k-th time derivative of position.
    """

    t: float
    position: NDArray[np.float64]
    derivatives: NDArray[np.float64]
    yaw: float | None = None
    yaw_rate: float | None = None


def evaluate(poly: PiecewisePolynomial, t: float, max_order: int = 4) -> TrajectorySample:
    if not isinstance(max_order, (int, np.integer)) or max_order < 0 or max_order > poly.degree:
        raise ArgumentError(f"max_order must be in [0, {poly.degree}], got {max_order!r}")
    i, s = poly.locate(t)
    block = poly.coeffs[i]
    values = np.array([block @ basis_row(s, r, poly.degree) for r in range(max(max_order, 1) + 1)])
    yaw = yaw_rate = None
    if poly.n_axes == 4:
        yaw = float(values[0, 3])
        yaw_rate = float(values[1, 3])
    return TrajectorySample(
        t=float(t),
        position=values[0, :3].copy(),
        derivatives=values[1 : max_order + 1, :3].copy(),
        yaw=yaw,
        yaw_rate=yaw_rate,
    )


def sample_times(total: float, rate: float) -> NDArray[np.float64]:
    """Lattice 0, 1/rate, ... strictly below ``total``, then ``total`` itself."""
    if not rate > 0:
        raise ArgumentError(f"rate must be positive, got {rate!r}")
    n_lattice = int(math.floor(total * rate + 1e-9))
    ts = np.arange(n_lattice + 1, dtype=np.float64) / rate
    if abs(ts[-1] - total) <= 1e-9 / rate:
        ts[-1] = total
    else:
        ts = np.append(ts, total)
    return ts


def evaluate_many(poly: PiecewisePolynomial, ts: NDArray[np.float64], max_order: int = 4) -> NDArray[np.float64]:
    """Values and derivatives at many times, shape ``[len(ts), max_order+1, n_axes]``."""
    ts = np.asarray(ts, dtype=np.float64)
    seg = np.clip(np.searchsorted(poly.knot_times, ts, side="left") - 1, 0, poly.n_segments - 1)
    local = ts - poly.knot_times[seg]
    out = np.empty((ts.size, max_order + 1, poly.n_axes))
    for r in range(max_order + 1):
        B = basis_matrix(local, r, poly.degree)
        out[:, r, :] = np.einsum("nk,nak->na", B, poly.coeffs[seg])
    return out


def sample_uniform(poly: PiecewisePolynomial, rate: float) -> list[TrajectorySample]:
    ts = sample_times(poly.total_time, rate)
    vals = evaluate_many(poly, ts, 4)
    samples = []
    for t, v in zip(ts, vals):
        yaw = yaw_rate = None
        if poly.n_axes == 4:
            yaw, yaw_rate = float(v[0, 3]), float(v[1, 3])
        samples.append(TrajectorySample(float(t), v[0, :3].copy(), v[1:, :3].copy(), yaw, yaw_rate))
    return samples


@lru_cache(maxsize=None)
def _gauss_legendre(n_nodes: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    return np.polynomial.legendre.leggauss(n_nodes)


def _segment_quadrature(coeffs: NDArray[np.float64], tau: float, order: int, degree: int) -> float:
    # integrand degree 2(m - r) needs m - r + 1 nodes for exactness
    n_nodes = degree - order + 1
    x, w = _gauss_legendre(n_nodes)
    s = 0.5 * tau * (x + 1.0)
    B = basis_matrix(s, order, degree)
    vals = B @ coeffs.T  # [nodes, axes]
    return float(0.5 * tau * np.sum(w[:, None] * vals**2))


def snap_integral(poly: PiecewisePolynomial, mu_r: float = 1.0, mu_psi: float = 0.0) -> float:
    """Integral of mu_r*|snap|^2 + mu_psi*(yaw acceleration)^2 by exact Gauss-Legendre quadrature."""
    total = 0.0
    for i in range(poly.n_segments):
        tau = float(poly.segment_durations[i])
        if mu_r:
            total += mu_r * _segment_quadrature(poly.coeffs[i, :3], tau, 4, poly.degree)
        if mu_psi and poly.n_axes == 4:
            total += mu_psi * _segment_quadrature(poly.coeffs[i, 3:4], tau, 2, poly.degree)
    return total


def write_csv(poly: PiecewisePolynomial, rate: float, path) -> int:
    """Write the sampled trajectory as CSV; returns the number of rows."""
    ts = sample_times(poly.total_time, rate)
    vals = evaluate_many(poly, ts, 4)
    lines = [CSV_HEADER]
    for t, v in zip(ts, vals):
        yaw = v[0, 3] if poly.n_axes == 4 else 0.0
        row = [t, *v[0, :3], yaw, *v[1, :3], *v[2, :3], *v[3, :3], *v[4, :3]]
        lines.append(",".join(f"{x:.12g}" for x in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(ts)
