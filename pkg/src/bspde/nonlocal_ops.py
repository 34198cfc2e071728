"""The family of non-local terminal couplings: linear maps taking a space-time
field u to a terminal-time space field that reads u only on [0, theta] with
theta strictly below the horizon.

Supported forms: a multiple of u(.,0) or of u(.,t1), a two-point combination,
a time-kernel integral, a full space-time kernel integral, and convex
combinations of these.  Validation snaps every referenced time to the nearest
grid level (ties round down), resamples kernels onto grid levels, and bounds
the resulting discrete weights by 1 in the sup-to-sup operator norm; the
application routine uses exactly the same weights, so contractivity of the
discrete operator holds by construction.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Union

import numpy as np

from .exprdsl import Expr, parse
from .grid import Grid, SpaceField, SpaceTimeField


class NonlocalValidationError(ValueError):
    pass


@dataclass(frozen=True)
class InitialValue:
    """weight * u(., 0), |weight| <= 1."""

    weight: float


@dataclass(frozen=True)
class PointInTime:
    """weight * u(., t1), |weight| <= 1, t1 snapped to a level strictly before T."""

    weight: float
    t1: float


@dataclass(frozen=True)
class TwoPoint:
    """weight1 * u(., t1) + weight2 * u(., t2) with |weight1| + |weight2| <= 1."""

    weight1: float
    t1: float
    weight2: float
    t2: float


@dataclass(frozen=True)
class TimeKernel:
    """integral_0^theta k(t) u(., t) dt by trapezoid rule on grid levels.

    kernel may be a number, an expression (string or Expr) in t, or a sequence
    of (time, value) samples that are linearly resampled onto grid levels.
    """

    theta: float
    kernel: object


@dataclass(frozen=True)
class SpaceTimeKernel:
    """integral_0^theta dt integral_D k(t, y, x) u(y, t) dy on grid nodes.

    kernel has shape (levels, n_interior, n_interior): time level, source node
    y (flat lexicographic), target node x (flat lexicographic).
    """

    theta: float
    kernel: np.ndarray


@dataclass(frozen=True)
class Convex:
    """Positively weighted combination with total weight <= 1."""

    weights: tuple[float, ...]
    parts: tuple["NonlocalSpec", ...]


NonlocalSpec = Union[InitialValue, PointInTime, TwoPoint, TimeKernel, SpaceTimeKernel, Convex]


@dataclass(frozen=True)
class NonlocalReport:
    """Validation outcome: the effective horizon (largest level the operator
    reads, as a time), the discrete norm bound, and time-snap distances."""

    theta: float
    norm_bound: float
    snap_distances: tuple[float, ...]


def _trapezoid_weights(n_levels: int, dt: float) -> np.ndarray:
    """Quadrature weights on levels 0..n_levels-1; zero-length integral when 1 level."""
    if n_levels == 1:
        return np.zeros(1)
    w = np.full(n_levels, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _snap_before_T(grid: Grid, t: float, what: str) -> tuple[int, float]:
    k, dist = grid.nearest_level(t)
    if k >= grid.nt:
        raise NonlocalValidationError(
            f"{what} = {t} snaps to the terminal level; the non-local operator "
            f"must read strictly before T = {grid.T}"
        )
    return k, dist


class _Compiled:
    """Discrete realization: per-level scalar weights plus an optional
    space-time weight tensor, applied additively."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.level_weights = np.zeros(grid.nt + 1)
        self.tensor: np.ndarray | None = None  # (levels read, n_int, n_int), weights folded
        self.max_level = 0
        self.snap_distances: list[float] = []
        self.norm_bound = 0.0

    def add_tensor(self, t: np.ndarray) -> None:
        if self.tensor is None:
            self.tensor = t.copy()
        elif t.shape[0] <= self.tensor.shape[0]:
            self.tensor[: t.shape[0]] += t
        else:
            t = t.copy()
            t[: self.tensor.shape[0]] += self.tensor
            self.tensor = t

    def apply(self, u: SpaceTimeField) -> SpaceField:
        if u.grid is not self.grid and (
            u.grid.nx != self.grid.nx
            or u.grid.nt != self.grid.nt
            or u.grid.domain != self.grid.domain
        ):
            raise NonlocalValidationError("field grid does not match the validated grid")
        if u.n_levels <= self.max_level:
            raise NonlocalValidationError("field does not cover the operator's horizon")
        L = self.max_level + 1
        vals = u.values[:L].reshape(L, -1)
        out = self.level_weights[:L] @ vals
        if self.tensor is not None:
            Lt = self.tensor.shape[0]
            out = out + np.einsum("kyx,ky->x", self.tensor, vals[:Lt])
        return SpaceField(self.grid, out.reshape(self.grid.interior_shape))


def _resample_time_kernel(kernel, grid: Grid, n_levels: int) -> np.ndarray:
    ts = grid.times()[:n_levels]
    if isinstance(kernel, (int, float, np.integer, np.floating)):
        return np.full(n_levels, float(kernel))
    if isinstance(kernel, (str, Expr)):
        e = parse(kernel) if isinstance(kernel, str) else kernel
        vals = np.asarray([np.asarray(e.eval({"t": float(t)}), dtype=float) for t in ts], dtype=float)
        return vals
    samples = np.asarray(kernel, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise NonlocalValidationError("sampled time kernel must be a sequence of (time, value) pairs")
    order = np.argsort(samples[:, 0])
    return np.interp(ts, samples[order, 0], samples[order, 1])


def _compile(spec: NonlocalSpec, grid: Grid) -> _Compiled:
    c = _Compiled(grid)
    if isinstance(spec, InitialValue):
        if abs(spec.weight) > 1:
            raise NonlocalValidationError(f"|weight| = {abs(spec.weight)} exceeds 1")
        c.level_weights[0] = spec.weight
        c.max_level = 0
        c.norm_bound = abs(spec.weight)
    elif isinstance(spec, PointInTime):
        if abs(spec.weight) > 1:
            raise NonlocalValidationError(f"|weight| = {abs(spec.weight)} exceeds 1")
        k, dist = _snap_before_T(grid, spec.t1, "t1")
        c.level_weights[k] = spec.weight
        c.max_level = k
        c.snap_distances.append(dist)
        c.norm_bound = abs(spec.weight)
    elif isinstance(spec, TwoPoint):
        total = abs(spec.weight1) + abs(spec.weight2)
        if total > 1:
            raise NonlocalValidationError(f"|weight1| + |weight2| = {total} exceeds 1")
        k1, d1 = _snap_before_T(grid, spec.t1, "t1")
        k2, d2 = _snap_before_T(grid, spec.t2, "t2")
        c.level_weights[k1] += spec.weight1
        c.level_weights[k2] += spec.weight2
        c.max_level = max(k1, k2)
        c.snap_distances += [d1, d2]
        c.norm_bound = total
    elif isinstance(spec, TimeKernel):
        k_theta, dist = _snap_before_T(grid, spec.theta, "theta")
        c.snap_distances.append(dist)
        kv = _resample_time_kernel(spec.kernel, grid, k_theta + 1)
        if not np.all(np.isfinite(kv)):
            raise NonlocalValidationError("time kernel has non-finite values")
        w = _trapezoid_weights(k_theta + 1, grid.dt)
        c.level_weights[: k_theta + 1] = w * kv
        c.max_level = k_theta
        c.norm_bound = float(np.sum(w * np.abs(kv)))
        if c.norm_bound > 1 + 1e-12:
            raise NonlocalValidationError(
                f"time-kernel quadrature of the absolute kernel is {c.norm_bound:.6g} > 1"
            )
    elif isinstance(spec, SpaceTimeKernel):
        k_theta, dist = _snap_before_T(grid, spec.theta, "theta")
        c.snap_distances.append(dist)
        n_int = grid.n_interior
        kv = np.asarray(spec.kernel, dtype=float)
        if kv.shape != (k_theta + 1, n_int, n_int):
            raise NonlocalValidationError(
                f"space-time kernel shape {kv.shape} != {(k_theta + 1, n_int, n_int)} "
                "(levels 0..theta, source node, target node)"
            )
        if not np.all(np.isfinite(kv)):
            raise NonlocalValidationError("space-time kernel has non-finite values")
        w = _trapezoid_weights(k_theta + 1, grid.dt)
        c.tensor = w[:, None, None] * kv * grid.cell_volume
        c.max_level = k_theta
        c.norm_bound = float(np.max(np.sum(np.abs(c.tensor), axis=(0, 1))))
        if c.norm_bound > 1 + 1e-12:
            raise NonlocalValidationError(
                f"space-time kernel bound is {c.norm_bound:.6g} > 1 at some target node"
            )
    elif isinstance(spec, Convex):
        if len(spec.weights) != len(spec.parts) or not spec.parts:
            raise NonlocalValidationError("convex combination needs matching weights and parts")
        ws = np.asarray(spec.weights, dtype=float)
        if np.any(ws <= 0):
            raise NonlocalValidationError("convex weights must be positive")
        if float(np.sum(ws)) > 1 + 1e-12:
            raise NonlocalValidationError(f"convex weights sum to {float(np.sum(ws)):.6g} > 1")
        c.norm_bound = 0.0
        for w, part in zip(ws, spec.parts):
            sub = _compile(part, grid)
            c.level_weights += w * sub.level_weights
            if sub.tensor is not None:
                c.add_tensor(w * sub.tensor)
            c.max_level = max(c.max_level, sub.max_level)
            c.snap_distances += sub.snap_distances
            c.norm_bound += w * sub.norm_bound
    else:
        raise NonlocalValidationError(f"unknown non-local operator type {type(spec)!r}")
    return c


def validate_spec(spec: NonlocalSpec, grid: Grid) -> NonlocalReport:
    """Check the parameter and discrete-norm constraints; raises on violation.

    Returns the snapped effective horizon (largest time level the operator
    reads), the discrete norm bound, and the snap distances.
    """
    c = _compile(spec, grid)
    return NonlocalReport(
        theta=float(c.max_level * grid.dt),
        norm_bound=c.norm_bound,
        snap_distances=tuple(c.snap_distances),
    )


def apply_nonlocal(spec: NonlocalSpec, u: SpaceTimeField) -> SpaceField:
    """Evaluate the non-local functional of u with the validated discrete weights."""
    return _compile(spec, u.grid).apply(u)


def truncation_check(spec: NonlocalSpec, u: SpaceTimeField, theta: float | None = None) -> bool:
    """True iff the operator gives bit-identical results on u and on u zeroed
    strictly after theta (default: the spec's own validated horizon)."""
    c = _compile(spec, u.grid)
    if theta is None:
        k_theta = c.max_level
    else:
        k_theta, _ = u.grid.nearest_level(theta)
    full = c.apply(u)
    truncated = c.apply(u.zeroed_after_level(k_theta))
    return bool(np.array_equal(full.values, truncated.values))


def kernel_from_csv(text_or_path, grid: Grid, theta: float) -> np.ndarray:
    """Read a tabulated space-time kernel from CSV columns t,x1[,x2],y1[,y2],k.

    Rows address grid levels and interior nodes (coordinates are snapped to
    the nearest node); missing entries are zero.  Returns the kernel array for
    SpaceTimeKernel(theta, ...).
    """
    if hasattr(text_or_path, "read"):
        text = text_or_path.read()
    elif "\n" in str(text_or_path):
        text = str(text_or_path)
    else:
        with open(text_or_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    k_theta, _ = _snap_before_T(grid, theta, "theta")
    n_int = grid.n_interior
    out = np.zeros((k_theta + 1, n_int, n_int))
    dim = grid.dim
    expected = ["t"] + [f"x{i+1}" for i in range(dim)] + [f"y{i+1}" for i in range(dim)] + ["k"]
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if [h.strip() for h in header] != expected:
        raise NonlocalValidationError(f"kernel CSV header must be {','.join(expected)}")

    def node_index(coords) -> int:
        idx = 0
        for a in range(dim):
            xs = grid.axis_coords(a)
            j = int(np.argmin(np.abs(xs - coords[a])))
            if abs(xs[j] - coords[a]) > 0.5 * grid.hx[a]:
                raise NonlocalValidationError(f"kernel CSV coordinate {coords[a]} is not a grid node")
            idx = idx * len(xs) + j
        return idx

    for row in reader:
        if not row:
            continue
        vals = [float(v) for v in row]
        t, xs, ys, kval = vals[0], vals[1 : 1 + dim], vals[1 + dim : 1 + 2 * dim], vals[-1]
        lvl, _ = grid.nearest_level(t)
        if lvl > k_theta:
            raise NonlocalValidationError(f"kernel CSV row at t = {t} lies beyond theta = {theta}")
        out[lvl, node_index(ys), node_index(xs)] = kval
    return out
