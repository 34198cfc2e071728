"""Shared builders for randomized batteries (all seeded, no global state)."""

from __future__ import annotations

import numpy as np
import pytest

from bspde import (
    CoefficientSet,
    Convex,
    Domain,
    Grid,
    InitialValue,
    PointInTime,
    SpaceField,
    SpaceTimeField,
    SpaceTimeKernel,
    TimeKernel,
    TwoPoint,
    make_grid,
)
from bspde.nonlocal_ops import _compile


@pytest.fixture
def unit_grid_1d() -> Grid:
    return make_grid(Domain((0.0,), (1.0,)), 21, 20, 1.0)


def random_field(rng: np.random.Generator, grid: Grid, scale: float = 1.0) -> SpaceField:
    return SpaceField(grid, rng.uniform(-scale, scale, grid.interior_shape))


def random_st_field(rng: np.random.Generator, grid: Grid, scale: float = 1.0) -> SpaceTimeField:
    return SpaceTimeField(grid, rng.uniform(-scale, scale, (grid.nt + 1,) + grid.interior_shape))


def random_coeffs_1d(rng: np.random.Generator, allow_time_dep: bool = True) -> CoefficientSet:
    """A validated-by-construction 1-D set: b bounded away from 0, lam <= 0,
    optional drift and a boundary-vanishing beta kept well inside the
    ellipticity budget."""
    b0 = rng.uniform(0.05, 0.5)
    if allow_time_dep and rng.random() < 0.3:
        b = f"{b0} + {b0 * 0.4}*sin(3*t)"
    elif rng.random() < 0.3:
        b = f"{b0}*(1 + 0.5*x*(1-x))"
    else:
        b = b0
    if rng.random() < 0.5:
        f = rng.uniform(-1.0, 1.0)
        if allow_time_dep and rng.random() < 0.3:
            f = f"{f}*cos(2*t)"
    else:
        f = 0.0
    lam = -rng.uniform(0.0, 1.0) if rng.random() < 0.7 else 0.0
    beta = []
    if rng.random() < 0.4:
        # sup |c*x*(1-x)| = c/4, so b - beta^2/2 >= 0.6*b0 - c^2/32 stays positive
        c = rng.uniform(0.0, np.sqrt(b0))
        beta = [[f"{c}*x*(1-x)"]]
    return CoefficientSet.create(1, b=b, f=f, lam=lam, beta=beta)


def random_spec(rng: np.random.Generator, grid: Grid, max_bound: float = 0.8, depth: int = 0):
    """A non-local spec valid on `grid` with norm bound <= max_bound."""
    kinds = ["initial", "point", "two", "tkernel", "stkernel"]
    if depth == 0:
        kinds.append("convex")
    kind = kinds[rng.integers(len(kinds))]
    if kind == "initial":
        return InitialValue(weight=float(rng.uniform(-max_bound, max_bound)))
    if kind == "point":
        lvl = int(rng.integers(0, grid.nt))  # strictly before the terminal level
        return PointInTime(weight=float(rng.uniform(-max_bound, max_bound)), t1=lvl * grid.dt)
    if kind == "two":
        a = rng.uniform(-1, 1, 2)
        a *= max_bound * rng.uniform(0.2, 1.0) / np.sum(np.abs(a))
        l1, l2 = rng.integers(0, grid.nt, 2)
        return TwoPoint(float(a[0]), l1 * grid.dt, float(a[1]), l2 * grid.dt)
    if kind == "tkernel":
        lvl = int(rng.integers(1, grid.nt))
        theta = lvl * grid.dt
        vals = rng.uniform(-1, 1, lvl + 1)
        spec = TimeKernel(theta=theta, kernel=np.column_stack([grid.times()[: lvl + 1], vals]))
        bound = _compile(spec, grid).norm_bound
        target = max_bound * rng.uniform(0.2, 1.0)
        vals = vals * (target / bound if bound > 0 else 0.0)
        return TimeKernel(theta=theta, kernel=np.column_stack([grid.times()[: lvl + 1], vals]))
    if kind == "stkernel":
        lvl = int(rng.integers(1, min(grid.nt, 8)))
        n = grid.n_interior
        k = rng.uniform(-1, 1, (lvl + 1, n, n))
        spec = SpaceTimeKernel(theta=lvl * grid.dt, kernel=k)
        bound = _compile(spec, grid).norm_bound
        target = max_bound * rng.uniform(0.2, 1.0)
        return SpaceTimeKernel(theta=lvl * grid.dt, kernel=k * (target / bound))
    # convex of two parts; total weight <= 1 keeps the combined bound <= max_bound
    w = rng.uniform(0.2, 0.5, 2)
    parts = tuple(random_spec(rng, grid, max_bound=max_bound, depth=1) for _ in range(2))
    return Convex(weights=(float(w[0]), float(w[1])), parts=parts)
