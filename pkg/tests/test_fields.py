import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbf_inverse.errors import DimensionError, DomainError
from cbf_inverse.fields import (
    Grid,
    HelmholtzSolver,
    ScalarField,
    TimeSeries,
    VelocityField,
    divergence,
    face_magnitudes,
    gradient,
    h1_inner,
    h1_seminorm,
    inner_product,
    laplacian_velocity,
    leray_project,
    lp_norm,
    solve_poisson_neumann,
    transverse_components,
)

from conftest import random_scalar, random_velocity

seeds = st.integers(min_value=0, max_value=2**32 - 1)
sizes = st.sampled_from([8, 9, 12, 16, 20])


# --- grid and containers ----------------------------------------------------

def test_grid_spacings_are_exact():
    g = Grid(64, 40)
    assert g.hx == 1 / 64 and g.hy == 1 / 40
    assert g.area == g.hx * g.hy


@pytest.mark.parametrize("nx,ny", [(7, 8), (8, 4), (0, 10)])
def test_grid_rejects_coarse_resolution(nx, ny):
    with pytest.raises(DomainError):
        Grid(nx, ny)


def test_velocity_walls_forced_to_zero(grid32, rng):
    v = VelocityField(np.ones((33, 32)), np.ones((32, 33)), grid32)
    assert np.all(v.ux[[0, -1], :] == 0) and np.all(v.uy[:, [0, -1]] == 0)
    assert v.ux[5, 5] == 1


def test_velocity_shape_mismatch(grid32):
    with pytest.raises(DimensionError):
        VelocityField(np.zeros((32, 32)), np.zeros((32, 33)), grid32)


def test_timeseries_invariants():
    with pytest.raises(DomainError):
        TimeSeries(0.0, 0.0, [1, 2])
    with pytest.raises(DomainError):
        TimeSeries(0.0, 0.1, [1, np.nan])
    ts = TimeSeries.from_function(lambda t: 2 * t, 0.25, 5)
    np.testing.assert_allclose(ts.times, [0, 0.25, 0.5, 0.75, 1.0])
    # right-endpoint rule: sqrt(0.25 * (0.25 + 1 + 2.25 + 4))
    assert ts.l2_norm() == pytest.approx(math.sqrt(0.25 * 7.5), rel=1e-15)


# --- inner product and norms ----------------------------------------------------

def test_inner_product_zero_and_constant(grid32, rng):
    b = random_velocity(grid32, rng)
    assert inner_product(VelocityField.zeros(grid32), b) == 0.0
    a = VelocityField(np.ones((33, 32)), np.zeros((32, 33)), grid32)
    # interior x-faces cover (nx-1)/nx of the square
    assert inner_product(a, a) == pytest.approx(31 / 32, rel=1e-14)


def test_inner_product_matches_brute_force(rng):
    g = Grid(9, 11)
    a, b = random_velocity(g, rng), random_velocity(g, rng)
    total = 0.0
    for i in range(g.nx + 1):
        for j in range(g.ny):
            total += a.ux[i, j] * b.ux[i, j] * g.hx * g.hy
    for i in range(g.nx):
        for j in range(g.ny + 1):
            total += a.uy[i, j] * b.uy[i, j] * g.hx * g.hy
    assert inner_product(a, b) == pytest.approx(total, rel=1e-13)


def test_inner_product_grid_mismatch(rng):
    with pytest.raises(DimensionError):
        inner_product(VelocityField.zeros(Grid(8, 8)), VelocityField.zeros(Grid(9, 8)))


@given(seeds, sizes)
def test_inner_product_symmetric_bilinear(seed, n):
    rng = np.random.default_rng(seed)
    g = Grid(n, n + 1)
    a, b, c = (random_velocity(g, rng) for _ in range(3))
    s = rng.normal()
    assert inner_product(a, b) == pytest.approx(inner_product(b, a), rel=1e-12, abs=1e-12)
    lhs = inner_product(a + s * b, c)
    assert lhs == pytest.approx(inner_product(a, c) + s * inner_product(b, c), rel=1e-10, abs=1e-10)


def test_lp_norm_examples(grid32, rng):
    assert lp_norm(VelocityField.zeros(grid32), 3) == 0.0
    a = random_velocity(grid32, rng)
    assert lp_norm(a, 2) == pytest.approx(math.sqrt(inner_product(a, a)), rel=1e-14)
    with pytest.raises(DomainError):
        lp_norm(a, 0.5)


def test_lp_norm_constant_vector_brute_force():
    g = Grid(128, 128)
    v = VelocityField(np.full((129, 128), 3.0), np.full((128, 129), 4.0), g)
    # oracle: every face carries |v|^(p-2) * component^2 with |v| from the
    # interpolated transverse component
    mx, my = face_magnitudes(v)
    brute = 0.0
    for arr, mag in ((v.ux, mx), (v.uy, my)):
        nz = mag > 0
        brute += np.sum(mag[nz] ** 2 * arr[nz] ** 2) * g.area
    assert lp_norm(v, 4) == pytest.approx(brute ** 0.25, rel=1e-13)
    # |v| = 5 away from the walls; the wall layers cost O(h)
    assert lp_norm(v, 4) == pytest.approx(5.0, rel=0.02)
    assert lp_norm(v, np.inf) == max(mx.max(), my.max())
    # faces whose transverse stencil stays off the walls see exactly |v| = 5
    np.testing.assert_allclose(mx[2:-2, 2:-2], 5.0, rtol=1e-14)
    np.testing.assert_allclose(my[2:-2, 2:-2], 5.0, rtol=1e-14)


def test_transverse_interpolation_fourth_order():
    # analytic no-slip field u = curl(sin^2(pi x) sin^2(pi y)), sampled exactly at faces
    def uy_exact(x, y):
        return -2 * np.pi * np.sin(np.pi * x) * np.cos(np.pi * x) * np.sin(np.pi * y) ** 2

    errs = []
    for n in (16, 32, 64):
        g = Grid(n, n)
        v = VelocityField.from_functions(g, lambda x, y: -uy_exact(y, x), uy_exact)
        uy_x, ux_y = transverse_components(v)
        X, Y = np.meshgrid(np.arange(n + 1) / n, (np.arange(n) + 0.5) / n, indexing="ij")
        errs.append(np.abs(uy_x - uy_exact(X, Y)).max())
        # the field is symmetric under x <-> y, so both reconstructions agree
        np.testing.assert_allclose(ux_y, -uy_x.T, atol=1e-14)
    for a, b in zip(errs, errs[1:]):
        assert a / b == pytest.approx(16.0, rel=0.05)


@given(seeds, st.floats(min_value=1.0, max_value=6.0),
       st.floats(min_value=-5, max_value=5).filter(lambda c: c == 0 or abs(c) > 1e-6))
def test_lp_norm_homogeneous(seed, p, c):
    rng = np.random.default_rng(seed)
    a = random_velocity(Grid(10, 10), rng)
    assert lp_norm(c * a, p) == pytest.approx(abs(c) * lp_norm(a, p), rel=1e-10, abs=1e-300)


# --- differential operators -----------------------------------------------------

def test_gradient_of_constant_is_zero(grid32):
    g = gradient(ScalarField(np.full((32, 32), 7.0), grid32))
    assert g.max_abs() == 0.0


def test_div_grad_is_five_point_laplacian(rng):
    g = Grid(16, 12)
    s = random_scalar(g, rng)
    lap = divergence(gradient(s)).values
    v = s.values
    brute = np.zeros_like(v)
    for i in range(g.nx):
        for j in range(g.ny):
            acc = 0.0
            for di, dj, h in ((1, 0, g.hx), (-1, 0, g.hx), (0, 1, g.hy), (0, -1, g.hy)):
                ii, jj = i + di, j + dj
                if 0 <= ii < g.nx and 0 <= jj < g.ny:  # Neumann: missing neighbour drops out
                    acc += (v[ii, jj] - v[i, j]) / h**2
            brute[i, j] = acc
    np.testing.assert_allclose(lap, brute, rtol=1e-12, atol=1e-9)


def test_laplacian_eigenfunction_second_order():
    errs = []
    for n in (16, 32, 64):
        g = Grid(n, n)
        v = VelocityField.from_functions(g, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y),
                                         lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
        lap = laplacian_velocity(v)
        d = lap + 2 * np.pi**2 * v
        # skip the wall-adjacent ghost layers where the one-sided ghost rule is first order
        errs.append(max(np.abs(d.ux[2:-2, 1:-1]).max(), np.abs(d.uy[1:-1, 2:-2]).max()))
    rates = [errs[i] / errs[i + 1] for i in range(2)]
    assert all(3.6 < r < 4.4 for r in rates), rates


def test_integration_by_parts(rng):
    for nx, ny in ((8, 8), (17, 23), (32, 32)):
        g = Grid(nx, ny)
        s, v = random_scalar(g, rng), random_velocity(g, rng)
        lhs = inner_product(gradient(s), v)
        rhs = -np.sum(s.values * divergence(v).values) * g.area
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_laplacian_symmetric_and_matches_seminorm(grid32, rng):
    a, b = random_velocity(grid32, rng), random_velocity(grid32, rng)
    assert inner_product(laplacian_velocity(a), b) == pytest.approx(inner_product(a, laplacian_velocity(b)), rel=1e-11)
    assert h1_seminorm(a) ** 2 == pytest.approx(-inner_product(laplacian_velocity(a), a), rel=1e-12)
    assert h1_inner(a, b) == pytest.approx(-inner_product(laplacian_velocity(a), b), rel=1e-11)


def test_h1_seminorm_constant_interior_matches_stencil_oracle():
    g = Grid(16, 16)
    v = VelocityField(np.ones((17, 16)), np.zeros((16, 17)), g)
    # brute force: x-differences hit the zero wall rows, y-differences only the
    # odd ghosts (jump 2 over a half-weighted wall difference)
    total = 0.0
    for i in range(g.nx):
        for j in range(g.ny):
            total += ((v.ux[i + 1, j] - v.ux[i, j]) / g.hx) ** 2 * g.area
    for i in range(1, g.nx):
        total += 2 * 0.5 * g.area * (2.0 / g.hy) ** 2
    assert h1_seminorm(v) == pytest.approx(math.sqrt(total), rel=1e-13)
    assert h1_seminorm(VelocityField.zeros(g)) == 0.0
    assert h1_seminorm(-3 * v) == pytest.approx(3 * h1_seminorm(v), rel=1e-14)


def test_ladyzhenskaya_diagnostic():
    g = Grid(128, 128)
    suite = [
        lambda x, y: np.sin(np.pi * x) ** 2 * np.sin(np.pi * y) ** 2,
        lambda x, y: np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * y) ** 2,
        lambda x, y: (x * (1 - x) * y * (1 - y)) ** 2,
        lambda x, y: np.sin(np.pi * x) ** 3 * np.sin(np.pi * y) ** 2 * np.exp(x),
    ]
    for psi in suite:
        v = VelocityField.from_stream_function(g, psi)
        lhs = lp_norm(v, 4) ** 2
        rhs = math.sqrt(2) * lp_norm(v, 2) * h1_seminorm(v)
        assert lhs <= 1.05 * rhs


# --- projection -------------------------------------------------------------------

def test_projection_examples(grid32, rng):
    s = random_scalar(grid32, rng)
    assert leray_project(gradient(s)).max_abs() < 1e-10 * gradient(s).max_abs()
    v = VelocityField.from_stream_function(grid32, lambda x, y: np.sin(np.pi * x) ** 2 * np.sin(np.pi * y) ** 2 * np.cos(3 * y))
    w = leray_project(v)
    assert (w - v).max_abs() < 1e-10


@given(seeds, sizes)
def test_projection_linear_idempotent_selfadjoint(seed, n):
    rng = np.random.default_rng(seed)
    g = Grid(n, n + 3)
    a, b = random_velocity(g, rng), random_velocity(g, rng)
    pa, pb = leray_project(a), leray_project(b)
    assert np.abs(divergence(pa).values).max() < 1e-10 * max(1, n)
    assert (leray_project(pa) - pa).max_abs() < 1e-10
    assert (leray_project(a + 2.5 * b) - (pa + 2.5 * pb)).max_abs() < 1e-9
    assert inner_product(pa, b) == pytest.approx(inner_product(a, pb), abs=1e-10)
    # orthogonality of the removed gradient part
    assert abs(inner_product(a - pa, pa)) < 1e-10 * (1 + inner_product(a, a))


def test_projection_potential_returned(grid32, rng):
    v = random_velocity(grid32, rng)
    w, phi = leray_project(v, return_potential=True)
    assert ((v - gradient(phi)) - w).max_abs() == 0.0
    assert abs(phi.mean()) < 1e-12


def test_poisson_neumann_residual(rng):
    g = Grid(24, 16)
    rhs = random_scalar(g, rng)
    rhs = ScalarField(rhs.values - rhs.mean(), g)
    sol = solve_poisson_neumann(rhs)
    res = divergence(gradient(sol)).values - rhs.values
    assert np.abs(res).max() < 1e-10 * np.abs(rhs.values).max()


@pytest.mark.parametrize("c0,c1", [(1.0, 0.0), (1.001, 1e-4), (1.0, 0.5)])
def test_helmholtz_solver_residual(c0, c1, rng):
    g = Grid(20, 28)
    rhs = random_velocity(g, rng)
    u = HelmholtzSolver(g, c0, c1).solve(rhs)
    res = c0 * u - c1 * laplacian_velocity(u) - rhs
    assert res.max_abs() < 1e-10 * rhs.max_abs()


def test_stream_function_field_is_divergence_free(grid32):
    v = VelocityField.from_stream_function(grid32, lambda x, y: np.sin(np.pi * x) ** 2 * np.cos(2 * y) * y**2 * (1 - y) ** 2)
    assert np.abs(divergence(v).values).max() < 1e-11
