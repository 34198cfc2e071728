import io

import numpy as np
import pytest

from bspde import (
    Convex,
    Domain,
    InitialValue,
    NonlocalValidationError,
    PointInTime,
    SpaceField,
    SpaceTimeField,
    SpaceTimeKernel,
    TimeKernel,
    TwoPoint,
    apply_nonlocal,
    kernel_from_csv,
    make_grid,
    sup_norm,
    truncation_check,
    validate_spec,
)

from conftest import random_spec, random_st_field


@pytest.fixture
def grid():
    return make_grid(Domain((0.0,), (1.0,)), 13, 20, 1.0)


def test_two_point_weight_bound(grid):
    with pytest.raises(NonlocalValidationError):
        validate_spec(TwoPoint(0.7, 0.2, 0.4, 0.5), grid)
    rep = validate_spec(TwoPoint(0.6, 0.2, 0.4, 0.5), grid)
    assert rep.norm_bound == pytest.approx(1.0)
    assert rep.theta == pytest.approx(0.5)


def test_time_kernel_constant_bound(grid):
    rep = validate_spec(TimeKernel(theta=0.5, kernel=2.0), grid)
    assert rep.norm_bound == pytest.approx(1.0)
    with pytest.raises(NonlocalValidationError):
        validate_spec(TimeKernel(theta=0.5, kernel=2.1), grid)


def test_point_at_terminal_time_rejected(grid):
    with pytest.raises(NonlocalValidationError):
        validate_spec(PointInTime(0.5, grid.T), grid)
    with pytest.raises(NonlocalValidationError):
        validate_spec(InitialValue(1.2), grid)


def test_initial_value_reads_level_zero(grid):
    rng = np.random.default_rng(1)
    u = random_st_field(rng, grid)
    out = apply_nonlocal(InitialValue(1.0), u)
    assert np.array_equal(out.values, u.values[0])


def test_mean_kernel_exact_on_time_constant(grid):
    u = SpaceTimeField.from_function(grid, lambda x, t: np.cos(3 * x))
    out = apply_nonlocal(TimeKernel(theta=0.5, kernel=1 / 0.5), u)
    assert np.allclose(out.values, np.cos(3 * grid.axis_coords(0)), atol=1e-13)


def test_convex_of_identical_parts_is_identity(grid):
    rng = np.random.default_rng(2)
    u = random_st_field(rng, grid)
    combo = Convex(weights=(0.5, 0.5), parts=(InitialValue(1.0), InitialValue(1.0)))
    assert np.allclose(apply_nonlocal(combo, u).values, u.values[0], atol=1e-15)


def test_snap_distance_reported():
    g = make_grid(Domain((0.0,), (1.0,)), 5, 4, 1.0)  # dt = 0.25
    rep = validate_spec(PointInTime(0.5, 0.3), g)
    assert rep.theta == pytest.approx(0.25)
    assert rep.snap_distances == (pytest.approx(0.05),)


def test_expression_time_kernel(grid):
    rep = validate_spec(TimeKernel(theta=0.5, kernel="2*t"), grid)
    # trapezoid of |2t| over [0, 0.5] is 0.25 exactly (piecewise linear)
    assert rep.norm_bound == pytest.approx(0.25)


def test_space_time_kernel_shapes_and_bound(grid):
    n = grid.n_interior
    lvl = 4
    k = np.ones((lvl + 1, n, n))
    spec = SpaceTimeKernel(theta=lvl * grid.dt, kernel=k)
    rep = validate_spec(spec, grid)
    # integral of 1 over y in D and t in [0, 0.2]: cellvol*n*dt-sum = ~0.2 * (11/12)
    assert 0 < rep.norm_bound <= 1
    with pytest.raises(NonlocalValidationError):
        validate_spec(SpaceTimeKernel(theta=lvl * grid.dt, kernel=np.ones((lvl, n, n))), grid)
    with pytest.raises(NonlocalValidationError):
        validate_spec(SpaceTimeKernel(theta=lvl * grid.dt, kernel=k * 20.0), grid)


def test_apply_is_linear(grid):
    rng = np.random.default_rng(3)
    for _ in range(20):
        spec = random_spec(rng, grid)
        u, v = random_st_field(rng, grid), random_st_field(rng, grid)
        a, b = rng.uniform(-2, 2, 2)
        lhs = apply_nonlocal(spec, SpaceTimeField(grid, a * u.values + b * v.values)).values
        rhs = a * apply_nonlocal(spec, u).values + b * apply_nonlocal(spec, v).values
        denom = max(1.0, np.max(np.abs(rhs)))
        assert np.max(np.abs(lhs - rhs)) / denom <= 1e-13


def test_contractivity_battery(grid):
    rng = np.random.default_rng(4)
    for _ in range(200):
        spec = random_spec(rng, grid, max_bound=1.0)
        rep = validate_spec(spec, grid)
        u = random_st_field(rng, grid, scale=rng.uniform(0.5, 2.0))
        assert sup_norm(apply_nonlocal(spec, u)) <= rep.norm_bound * sup_norm(u) + 1e-12


def test_truncation_battery(grid):
    rng = np.random.default_rng(5)
    for _ in range(100):
        spec = random_spec(rng, grid)
        u = random_st_field(rng, grid)
        assert truncation_check(spec, u)


def test_truncation_negative_control(grid):
    # an operator that claims horizon 0.2 but reads t = 0.5 must fail the check
    rng = np.random.default_rng(6)
    u = random_st_field(rng, grid)
    spec = PointInTime(0.5, 0.5)
    assert truncation_check(spec, u)
    assert not truncation_check(spec, u, theta=0.2)
    assert truncation_check(InitialValue(0.7), u, theta=0.0)


def test_convex_weight_validation(grid):
    with pytest.raises(NonlocalValidationError):
        validate_spec(Convex(weights=(0.7, 0.6), parts=(InitialValue(1.0), InitialValue(1.0))), grid)
    with pytest.raises(NonlocalValidationError):
        validate_spec(Convex(weights=(-0.1,), parts=(InitialValue(1.0),)), grid)


def test_effective_theta_is_max_over_parts(grid):
    combo = Convex(
        weights=(0.3, 0.3),
        parts=(PointInTime(1.0, 0.25), TimeKernel(theta=0.6, kernel=1.0)),
    )
    rep = validate_spec(combo, grid)
    assert rep.theta == pytest.approx(0.6)
    assert rep.norm_bound == pytest.approx(0.3 * 1.0 + 0.3 * 0.6)


def test_kernel_csv_roundtrip():
    g = make_grid(Domain((0.0,), (1.0,)), 5, 4, 1.0)
    rows = ["t,x1,y1,k"]
    # k(t, y, x) = 1 at t=0 coupling node y=0.25 into every x
    for x in (0.25, 0.5, 0.75):
        rows.append(f"0.0,{x},0.25,1.0")
    kern = kernel_from_csv(io.StringIO("\n".join(rows)), g, theta=0.5)
    assert kern.shape == (3, 3, 3)
    assert np.array_equal(kern[0, 0, :], np.ones(3))
    assert kern[1:].sum() == 0.0
    spec = SpaceTimeKernel(theta=0.5, kernel=kern)
    validate_spec(spec, g)
    with pytest.raises(NonlocalValidationError):
        kernel_from_csv(io.StringIO("t,x1,y1,k\n0.9,0.25,0.25,1.0"), g, theta=0.5)
    with pytest.raises(NonlocalValidationError):
        kernel_from_csv(io.StringIO("bad,header\n"), g, theta=0.5)


def test_grid_mismatch_rejected(grid):
    from bspde.nonlocal_ops import _compile

    other = make_grid(Domain((0.0,), (1.0,)), 17, 20, 1.0)
    rng = np.random.default_rng(7)
    u = random_st_field(rng, other)
    with pytest.raises(NonlocalValidationError):
        _compile(InitialValue(1.0), grid).apply(u)
