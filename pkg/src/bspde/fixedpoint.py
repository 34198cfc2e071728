"""Picard iteration on the terminal value for the non-local problem, plus a
dense direct solve used as a desk-scale oracle.

The terminal condition u(.,T) = terminal_rhs + (non-local functional of u) is
solved by iterating Phi <- terminal_rhs + G(source response + terminal
response of Phi), where G is the validated non-local map.  Because G is a
discrete contraction composed with a max-principle-bounded solve, the
iteration converges geometrically; the direct route assembles the matrix of
Phi -> G(terminal response of Phi) column by column and inverts I minus it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid, SpaceField, SpaceTimeField, sup_norm
from .nonlocal_ops import NonlocalSpec, _compile
from .stepper import source_response, terminal_response


class FixedPointDivergence(RuntimeError):
    """Residual ratios stayed >= 1 for five consecutive iterations."""

    def __init__(self, message: str, report: "FixedPointReport"):
        super().__init__(message)
        self.report = report


@dataclass
class FixedPointReport:
    iterations: int
    residuals: tuple[float, ...]
    ratios: tuple[float, ...]
    converged: bool
    bc_residual: float

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "residuals": list(self.residuals),
            "ratios": list(self.ratios),
            "converged": self.converged,
            "bc_residual": self.bc_residual,
        }


@dataclass
class NonlocalSolution:
    u: SpaceTimeField
    terminal: SpaceField
    report: FixedPointReport


def _bc_residual(compiled, u: SpaceTimeField, terminal_rhs: SpaceField) -> float:
    gamma_u = compiled.apply(u)
    r = u.values[-1] - gamma_u.values - terminal_rhs.values
    return float(np.max(np.abs(r))) if r.size else 0.0


def solve_nonlocal(
    grid: Grid,
    coeffs,
    source: SpaceTimeField | None,
    terminal_rhs: SpaceField,
    spec: NonlocalSpec,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> NonlocalSolution:
    """Picard iteration starting from Phi_0 = terminal_rhs.

    Each iteration is one evaluation of the fixed-point map.  Convergence is
    declared when the iterate difference drops to tol; the first iteration may
    declare it only for the exactly-zero fixed point, so any nonzero problem
    gets at least one confirming pass.  The boundary-condition residual of the
    assembled solution is recomputed independently and reported.  Raises
    FixedPointDivergence after five consecutive non-contracting ratios; hitting
    max_iter returns an unconverged report instead.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    compiled = _compile(spec, grid)
    u_src = source_response(grid, coeffs, source) if source is not None else None
    src_term = (
        compiled.apply(u_src).values if u_src is not None else np.zeros(grid.interior_shape)
    )

    phi = terminal_rhs.values
    residuals: list[float] = []
    ratios: list[float] = []
    converged = False
    for m in range(1, max_iter + 1):
        u_term = terminal_response(grid, coeffs, SpaceField(grid, phi))
        phi_new = terminal_rhs.values + src_term + compiled.apply(u_term).values
        res = float(np.max(np.abs(phi_new - phi)))
        residuals.append(res)
        if m >= 2 and residuals[-2] > 0:
            ratios.append(res / residuals[-2])
            if len(ratios) >= 5 and all(r >= 1.0 for r in ratios[-5:]):
                report = FixedPointReport(m, tuple(residuals), tuple(ratios), False, float("nan"))
                raise FixedPointDivergence(
                    "fixed-point iteration is not contracting (five consecutive "
                    "residual ratios >= 1); the discrete non-local operator norm "
                    "likely reaches 1",
                    report,
                )
        phi = phi_new
        if res <= tol and (m >= 2 or (res == 0.0 and not np.any(phi))):
            converged = True
            break

    terminal_field = SpaceField(grid, phi)
    u_term = terminal_response(grid, coeffs, terminal_field)
    u = u_term if u_src is None else SpaceTimeField(grid, u_src.values + u_term.values)
    report = FixedPointReport(
        iterations=len(residuals),
        residuals=tuple(residuals),
        ratios=tuple(ratios),
        converged=converged,
        bc_residual=_bc_residual(compiled, u, terminal_rhs),
    )
    return NonlocalSolution(u=u, terminal=terminal_field, report=report)


@dataclass
class FeedbackMatrix:
    """Dense matrix of Phi -> nonlocal(terminal response of Phi) over interior nodes."""

    matrix: np.ndarray
    sup_norm: float  # max absolute row sum


def assemble_feedback_matrix(grid: Grid, coeffs, spec: NonlocalSpec, cap: int = 2000) -> FeedbackMatrix:
    """Column j is the operator applied to the j-th canonical basis field.

    Refuses grids with more than `cap` interior nodes; the matrix is dense.
    """
    n = grid.n_interior
    if n > cap:
        raise ValueError(f"{n} interior nodes exceed the dense-matrix cap {cap}")
    compiled = _compile(spec, grid)
    Q = np.empty((n, n))
    basis = np.zeros(grid.interior_shape)
    flat = basis.ravel()
    for j in range(n):
        flat[j] = 1.0
        u = terminal_response(grid, coeffs, SpaceField(grid, basis.copy()))
        Q[:, j] = compiled.apply(u).values.ravel()
        flat[j] = 0.0
    return FeedbackMatrix(matrix=Q, sup_norm=float(np.max(np.sum(np.abs(Q), axis=1))))


def solve_nonlocal_direct(
    grid: Grid,
    coeffs,
    source: SpaceTimeField | None,
    terminal_rhs: SpaceField,
    spec: NonlocalSpec,
    cap: int = 2000,
) -> NonlocalSolution:
    """Solve (I - feedback matrix) Phi = terminal_rhs + nonlocal(source response)
    by dense elimination; the oracle counterpart of solve_nonlocal."""
    compiled = _compile(spec, grid)
    fm = assemble_feedback_matrix(grid, coeffs, spec, cap=cap)
    rhs = terminal_rhs.values.ravel().copy()
    u_src = source_response(grid, coeffs, source) if source is not None else None
    if u_src is not None:
        rhs += compiled.apply(u_src).values.ravel()
    n = grid.n_interior
    try:
        phi = np.linalg.solve(np.eye(n) - fm.matrix, rhs)
    except np.linalg.LinAlgError as e:
        raise RuntimeError(
            f"I minus the feedback matrix is numerically singular (its sup norm is "
            f"{fm.sup_norm:.6g}, so an operator with norm >= 1 slipped through validation)"
        ) from e
    terminal_field = SpaceField(grid, phi.reshape(grid.interior_shape))
    u_term = terminal_response(grid, coeffs, terminal_field)
    u = u_term if u_src is None else SpaceTimeField(grid, u_src.values + u_term.values)
    report = FixedPointReport(
        iterations=0,
        residuals=(),
        ratios=(),
        converged=True,
        bc_residual=_bc_residual(compiled, u, terminal_rhs),
    )
    return NonlocalSolution(u=u, terminal=terminal_field, report=report)
