"""Uniform space-time grids on axis-aligned boxes, and the fields living on them.

Fields store interior nodes only: the homogeneous Dirichlet wall is structural,
not data. All grids are uniform per axis; time levels are k*dt, k = 0..nt.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Domain:
    """Axis-aligned open box in 1 or 2 dimensions."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if len(self.lo) != len(self.hi):
            raise GridError("lo and hi must have the same length")
        if self.dim not in (1, 2):
            raise GridError(f"only 1-D and 2-D boxes are supported, got dim={self.dim}")
        for a, b in zip(self.lo, self.hi):
            if not (np.isfinite(a) and np.isfinite(b)):
                raise GridError("domain bounds must be finite")
            if not a < b:
                raise GridError(f"degenerate domain: lo={a} >= hi={b}")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def widths(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    def contains(self, x) -> bool:
        """Strict interior membership."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return bool(np.all(x > np.asarray(self.lo)) and np.all(x < np.asarray(self.hi)))


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on domain x [0, T].

    nx counts nodes per axis including both boundary nodes, so there are
    nx[i] - 2 interior nodes along axis i.  dt = T / nt exactly.
    """

    domain: Domain
    nx: tuple[int, ...]
    nt: int
    T: float
    hx: tuple[float, ...] = field(init=False)
    dt: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "nx", tuple(int(n) for n in self.nx))
        if len(self.nx) != self.domain.dim:
            raise GridError("nx must give one node count per axis")
        for n in self.nx:
            if n < 3:
                raise GridError(f"need at least 3 nodes per axis (2 boundary + 1 interior), got {n}")
        if self.nt < 1:
            raise GridError(f"nt must be >= 1, got {self.nt}")
        if not self.T > 0:
            raise GridError(f"time horizon must be positive, got {self.T}")
        object.__setattr__(
            self,
            "hx",
            tuple(w / (n - 1) for w, n in zip(self.domain.widths, self.nx)),
        )
        object.__setattr__(self, "dt", self.T / self.nt)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def interior_shape(self) -> tuple[int, ...]:
        return tuple(n - 2 for n in self.nx)

    @property
    def n_interior(self) -> int:
        return int(np.prod(self.interior_shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.hx))

    def axis_coords(self, axis: int, interior_only: bool = True) -> np.ndarray:
        lo = self.domain.lo[axis]
        xs = lo + self.hx[axis] * np.arange(self.nx[axis])
        return xs[1:-1] if interior_only else xs

    def interior_points(self) -> np.ndarray:
        """Coordinates of interior nodes, shape (n_interior, dim), lexicographic order."""
        axes = [self.axis_coords(a) for a in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.nt + 1)

    def nearest_level(self, t: float) -> tuple[int, float]:
        """Snap a time to the nearest grid level; ties round down.

        Returns (level, snap_distance).
        """
        if not 0.0 <= t <= self.T + 1e-12 * max(1.0, self.T):
            raise GridError(f"time {t} outside [0, {self.T}]")
        raw = t / self.dt
        k = int(np.floor(raw + 0.5))
        if k - raw == 0.5:  # tie: round down
            k -= 1
        k = min(max(k, 0), self.nt)
        return k, abs(k * self.dt - t)


def make_grid(domain: Domain, nx, nt: int, T: float) -> Grid:
    """Build a uniform grid; nx may be an int (same count on every axis) or a sequence."""
    if isinstance(nx, (int, np.integer)):
        nx = (int(nx),) * domain.dim
    return Grid(domain=domain, nx=tuple(nx), nt=int(nt), T=float(T))


@dataclass(frozen=True)
class SpaceField:
    """Values at interior nodes of one time slice; the boundary is implicitly 0."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.interior_shape:
            raise GridError(f"field shape {v.shape} != interior shape {self.grid.interior_shape}")
        if not np.all(np.isfinite(v)):
            raise GridError("field contains non-finite values")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: Grid) -> "SpaceField":
        return cls(grid, np.zeros(grid.interior_shape))

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "SpaceField":
        """Sample fn at interior nodes; fn takes dim positional coordinates."""
        axes = [grid.axis_coords(a) for a in range(grid.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return cls(grid, np.asarray(fn(*mesh), dtype=float) * np.ones(grid.interior_shape))


@dataclass(frozen=True)
class SpaceTimeField:
    """One interior-node slice per time level 0..n_levels-1 on a shared grid.

    Full-horizon fields have n_levels = nt + 1; backward solves stopped at an
    intermediate level s carry levels 0..s only.
    """

    grid: Grid
    values: np.ndarray  # shape (n_levels, *interior_shape)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != self.grid.dim + 1 or v.shape[1:] != self.grid.interior_shape:
            raise GridError(f"space-time field shape {v.shape} does not match grid")
        if v.shape[0] < 1 or v.shape[0] > self.grid.nt + 1:
            raise GridError(f"{v.shape[0]} time levels but grid has {self.grid.nt + 1}")
        if not np.all(np.isfinite(v)):
            raise GridError("field contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def n_levels(self) -> int:
        return self.values.shape[0]

    def level(self, k: int) -> SpaceField:
        return SpaceField(self.grid, self.values[k])

    @classmethod
    def zeros(cls, grid: Grid, n_levels: int | None = None) -> "SpaceTimeField":
        n = grid.nt + 1 if n_levels is None else n_levels
        return cls(grid, np.zeros((n,) + grid.interior_shape))

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "SpaceTimeField":
        """Sample fn(*coords, t) at every interior node and time level."""
        axes = [grid.axis_coords(a) for a in range(grid.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        levels = [
            np.asarray(fn(*mesh, t), dtype=float) * np.ones(grid.interior_shape)
            for t in grid.times()
        ]
        return cls(grid, np.stack(levels))

    def zeroed_after_level(self, k: int) -> "SpaceTimeField":
        """Copy with all levels strictly after k set to zero."""
        v = self.values.copy()
        v[k + 1 :] = 0.0
        return SpaceTimeField(self.grid, v)


def sup_norm(f: SpaceField | SpaceTimeField) -> float:
    """Max absolute node value (over all time levels for a space-time field)."""
    v = f.values
    return float(np.max(np.abs(v))) if v.size else 0.0


def weighted_l2_norm(f: SpaceField) -> float:
    """sqrt(sum of value^2 * cell volume); discrete stand-in for the L2(D) norm."""
    return float(np.sqrt(np.sum(f.values**2) * f.grid.cell_volume))


def _interp_matrix_1d(n_coarse: int, factor: int) -> np.ndarray:
    """Linear interpolation weights from a coarse axis (n_coarse nodes, boundary
    included, boundary values zero) onto the refined axis' interior nodes."""
    n_fine = (n_coarse - 1) * factor + 1
    w = np.zeros((n_fine - 2, n_coarse - 2))
    for j in range(1, n_fine - 1):
        pos = j / factor  # coarse-index coordinate
        i0 = int(np.floor(pos))
        frac = pos - i0
        for i, wt in ((i0, 1.0 - frac), (i0 + 1, frac)):
            if wt != 0.0 and 1 <= i <= n_coarse - 2:
                w[j - 1, i - 1] += wt
    return w


def refine(f: SpaceTimeField, factor: int) -> SpaceTimeField:
    """Linear interpolation onto a grid with (nx-1)*factor+1 nodes per axis and
    nt*factor time steps. Interpolated values are convex combinations of the
    originals (boundary zeros included), so the sup norm cannot grow."""
    factor = int(factor)
    if factor < 2:
        raise GridError(f"refinement factor must be >= 2, got {factor}")
    g = f.grid
    fine = make_grid(
        g.domain,
        tuple((n - 1) * factor + 1 for n in g.nx),
        g.nt * factor,
        g.T,
    )
    mats = [_interp_matrix_1d(g.nx[a], factor) for a in range(g.dim)]

    out = np.empty((fine.nt + 1,) + fine.interior_shape)
    # Spatial interpolation of the stored coarse levels, then linear in time.
    coarse_in_space = []
    for k in range(f.n_levels):
        v = f.values[k]
        v = mats[0] @ v if g.dim == 1 else mats[0] @ v @ mats[1].T
        coarse_in_space.append(v)
    n_fine_levels = (f.n_levels - 1) * factor + 1
    for j in range(n_fine_levels):
        k0, r = divmod(j, factor)
        if r == 0:
            out[j] = coarse_in_space[k0]
        else:
            w = r / factor
            out[j] = (1.0 - w) * coarse_in_space[k0] + w * coarse_in_space[k0 + 1]
    return SpaceTimeField(fine, out[:n_fine_levels])


def field_to_csv(f: SpaceField | SpaceTimeField) -> str:
    """CSV dump: header t,x1[,x2],u; rows time-major then lexicographic node order."""
    grid = f.grid
    if isinstance(f, SpaceField):
        levels = [(grid.T, f.values)]
    else:
        times = grid.times()
        levels = [(times[k], f.values[k]) for k in range(f.n_levels)]
    coord_cols = ["x1"] if grid.dim == 1 else ["x1", "x2"]
    buf = io.StringIO()
    buf.write(",".join(["t"] + coord_cols + ["u"]) + "\n")
    pts = grid.interior_points()
    for t, v in levels:
        flat = v.ravel()
        for p, val in zip(pts, flat):
            coords = ",".join(repr(float(c)) for c in p)
            buf.write(f"{float(t)!r},{coords},{float(val)!r}\n")
    return buf.getvalue()
