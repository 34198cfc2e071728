"""Backward-in-time implicit finite differences on the box.

Marches t from the terminal level down to 0, each step solving
(I - dt*A_h(t_k)) u^k = u^{k+1} + dt*source^k, where A_h discretizes the
spatial operator with central second differences for the diagonal diffusion,
the 4-point cross stencil for the mixed term, first-order upwind for the
drift, and the zeroth-order coefficient on the diagonal.  With no mixed term
and lam <= 0 the system matrix is an M-matrix, so the discrete solution obeys
the maximum principle sup|u| <= sup|terminal| + duration*sup|source|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import bicgstab, spsolve

from .coefficients import CoefficientSet
from .exprdsl import free_variables
from .grid import Grid, SpaceField, SpaceTimeField, sup_norm

SPARSE_RESIDUAL_TOL = 1e-10  # sup-norm target for the 2-D iterative solve


class LinearSolveError(RuntimeError):
    pass


def solve_tridiagonal(dl: np.ndarray, d: np.ndarray, du: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Direct elimination for a tridiagonal system; dl[0] and du[-1] are ignored.

    No pivoting: rows here are strictly diagonally dominant by construction.
    """
    n = d.size
    c = np.empty(n)
    x = np.empty(n)
    if d[0] == 0.0:
        raise LinearSolveError("singular tridiagonal system")
    c[0] = du[0] / d[0]
    x[0] = rhs[0] / d[0]
    for i in range(1, n):
        m = d[i] - dl[i] * c[i - 1]
        if m == 0.0:
            raise LinearSolveError("singular tridiagonal system")
        c[i] = du[i] / m
        x[i] = (rhs[i] - dl[i] * x[i - 1]) / m
    for i in range(n - 2, -1, -1):
        x[i] -= c[i] * x[i + 1]
    return x


@dataclass
class SolveDiagnostics:
    monotone: bool
    worst_positive_offdiag: float  # of (I - dt*A_h); 0 when the scheme is monotone
    max_principle_slack: float  # bound minus achieved sup; negative = violated
    max_linear_residual: float


@dataclass
class SolveOutput:
    u: SpaceTimeField  # levels 0..level
    diagnostics: SolveDiagnostics


def _is_time_dependent(coeffs: CoefficientSet) -> bool:
    entries = [e for row in coeffs.b for e in row]
    entries += list(coeffs.f) + [coeffs.lam]
    for vec in coeffs.beta:
        entries += list(vec)
    return any("t" in free_variables(e) for e in entries)


class _System1D:
    """Tridiagonal (I - dt*A_h) at one time level."""

    def __init__(self, grid: Grid, coeffs: CoefficientSet, t: float):
        pts = grid.interior_points()
        h = grid.hx[0]
        dt = grid.dt
        bv = coeffs.b_at(pts, t)[:, 0, 0]
        fv = coeffs.f_at(pts, t)[:, 0]
        lv = coeffs.lam_at(pts, t)
        lower = bv / h**2 + np.maximum(-fv, 0.0) / h
        upper = bv / h**2 + np.maximum(fv, 0.0) / h
        diag = -2.0 * bv / h**2 - np.abs(fv) / h + lv
        self.dl = -dt * lower
        self.d = 1.0 - dt * diag
        self.du = -dt * upper
        self.worst_positive_offdiag = max(0.0, float(np.max(self.dl)), float(np.max(self.du)))

    def solve(self, rhs: np.ndarray) -> tuple[np.ndarray, float]:
        x = solve_tridiagonal(self.dl, self.d, self.du, rhs)
        r = self.d * x - rhs
        r[1:] += self.dl[1:] * x[:-1]
        r[:-1] += self.du[:-1] * x[1:]
        return x, float(np.max(np.abs(r)))


class _System2D:
    """Sparse (I - dt*A_h) at one time level, solved iteratively."""

    def __init__(self, grid: Grid, coeffs: CoefficientSet, t: float):
        m1, m2 = grid.interior_shape
        h1, h2 = grid.hx
        dt = grid.dt
        pts = grid.interior_points()
        b = coeffs.b_at(pts, t)
        b11 = b[:, 0, 0].reshape(m1, m2)
        b22 = b[:, 1, 1].reshape(m1, m2)
        b12 = b[:, 0, 1].reshape(m1, m2)
        f = coeffs.f_at(pts, t)
        f1 = f[:, 0].reshape(m1, m2)
        f2 = f[:, 1].reshape(m1, m2)
        lv = coeffs.lam_at(pts, t).reshape(m1, m2)

        diag_A = (
            -2.0 * b11 / h1**2
            - 2.0 * b22 / h2**2
            - np.abs(f1) / h1
            - np.abs(f2) / h2
            + lv
        )
        cross = b12 / (2.0 * h1 * h2)
        # offset -> A-coefficient array (value multiplying u at node+offset)
        stencil = {
            (1, 0): b11 / h1**2 + np.maximum(f1, 0.0) / h1,
            (-1, 0): b11 / h1**2 + np.maximum(-f1, 0.0) / h1,
            (0, 1): b22 / h2**2 + np.maximum(f2, 0.0) / h2,
            (0, -1): b22 / h2**2 + np.maximum(-f2, 0.0) / h2,
            (1, 1): cross,
            (-1, -1): cross,
            (1, -1): -cross,
            (-1, 1): -cross,
        }
        idx = np.arange(m1 * m2).reshape(m1, m2)
        rows = [idx.ravel()]
        cols = [idx.ravel()]
        data = [(1.0 - dt * diag_A).ravel()]
        worst = 0.0
        for (di, dj), coef in stencil.items():
            src = idx[max(0, -di) : m1 - max(0, di), max(0, -dj) : m2 - max(0, dj)]
            dst = idx[max(0, di) : m1 + min(0, di), max(0, dj) : m2 + min(0, dj)]
            vals = -dt * coef[max(0, -di) : m1 - max(0, di), max(0, -dj) : m2 - max(0, dj)]
            rows.append(src.ravel())
            cols.append(dst.ravel())
            data.append(vals.ravel())
            if vals.size:
                worst = max(worst, float(np.max(vals)))
        self.M = csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(m1 * m2, m1 * m2),
        )
        self.worst_positive_offdiag = max(0.0, worst)

    def solve(self, rhs: np.ndarray) -> tuple[np.ndarray, float]:
        scale = max(1.0, float(np.max(np.abs(rhs))))
        x, info = bicgstab(self.M, rhs, rtol=1e-14, atol=SPARSE_RESIDUAL_TOL * scale * 1e-2, maxiter=4000)
        for _ in range(3):
            r = rhs - self.M @ x
            res = float(np.max(np.abs(r)))
            if res <= SPARSE_RESIDUAL_TOL * scale:
                return x, res
            dx, info = bicgstab(self.M, r, rtol=1e-14, atol=SPARSE_RESIDUAL_TOL * scale * 1e-2, maxiter=4000)
            x = x + dx
        # iterative solve stalled; fall back to a direct factorization
        x = spsolve(self.M, rhs)
        res = float(np.max(np.abs(rhs - self.M @ x)))
        if not np.all(np.isfinite(x)):
            raise LinearSolveError("sparse linear solve failed (singular or ill-conditioned system)")
        return x, res


def _build_system(grid: Grid, coeffs: CoefficientSet, t: float):
    return _System1D(grid, coeffs, t) if grid.dim == 1 else _System2D(grid, coeffs, t)


def solve_terminal(
    grid: Grid,
    coeffs: CoefficientSet,
    source: SpaceTimeField | None = None,
    terminal: SpaceField | None = None,
    level: int | None = None,
) -> SolveOutput:
    """March the backward problem from time level `level` (default nt) to 0.

    source may be None (zero) or a space-time field covering levels 0..level;
    terminal None means zero terminal data.  Returns the solution on levels
    0..level together with monotonicity / maximum-principle diagnostics.
    """
    s = grid.nt if level is None else int(level)
    if not 0 < s <= grid.nt:
        raise ValueError(f"terminal level must be in 1..{grid.nt}, got {s}")
    if terminal is None:
        terminal = SpaceField.zeros(grid)
    if source is not None and source.n_levels < s + 1:
        raise ValueError("source field does not cover levels 0..level")

    shape = grid.interior_shape
    u = np.empty((s + 1,) + shape)
    u[s] = terminal.values
    worst_offdiag = 0.0
    max_resid = 0.0
    system = None
    time_dep = _is_time_dependent(coeffs)
    for k in range(s - 1, -1, -1):
        if system is None or time_dep:
            system = _build_system(grid, coeffs, grid.dt * k)
            worst_offdiag = max(worst_offdiag, system.worst_positive_offdiag)
        rhs = u[k + 1].ravel().copy()
        if source is not None:
            rhs += grid.dt * source.values[k].ravel()
        x, resid = system.solve(rhs)
        max_resid = max(max_resid, resid)
        u[k] = x.reshape(shape)

    out = SpaceTimeField(grid, u)
    duration = grid.dt * s
    bound = sup_norm(terminal) + duration * (sup_norm(source) if source is not None else 0.0)
    diags = SolveDiagnostics(
        monotone=worst_offdiag <= 0.0,
        worst_positive_offdiag=worst_offdiag,
        max_principle_slack=bound - sup_norm(out),
        max_linear_residual=max_resid,
    )
    return SolveOutput(u=out, diagnostics=diags)


def source_response(grid: Grid, coeffs: CoefficientSet, source: SpaceTimeField) -> SpaceTimeField:
    """Backward solve with zero terminal data (response to the source alone)."""
    return solve_terminal(grid, coeffs, source=source).u


def terminal_response(grid: Grid, coeffs: CoefficientSet, terminal: SpaceField) -> SpaceTimeField:
    """Backward solve with zero source (response to the terminal data alone)."""
    return solve_terminal(grid, coeffs, terminal=terminal).u
