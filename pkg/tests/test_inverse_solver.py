import json
import math

import numpy as np
import pytest
from scipy import integrate

from cbf_inverse.direct_solver import SolverConfig, solve_direct
from cbf_inverse.errors import AdmissibilityError, DomainError
from cbf_inverse.fields import Grid, TimeSeries, VelocityField, inner_product
from cbf_inverse.inverse_solver import (
    InverseProblemData,
    admissibility,
    admissibility_from_norms,
    apply_A,
    ball_center,
    data_norms,
    g1_series,
    measured_contraction,
    observe,
    phi_derivative,
    solve_inverse_marching,
    solve_inverse_picard,
)
from cbf_inverse.manufactured import CASE_PARAMS, build_case, make_case, sample_omega, sample_velocity

SMALL = SolverConfig(Grid(16, 16), 1e-2, 0.1, CASE_PARAMS)


def rel_l2(a: TimeSeries, b: TimeSeries) -> float:
    return a.with_samples(a.samples - b.samples).l2_norm() / b.l2_norm()


def static_data(g_field: VelocityField, omega: VelocityField, cfg=SMALL, phi=None, u0=None, g0_min=1e-3):
    n = cfg.nsteps + 1
    phi = phi if phi is not None else TimeSeries(0.0, cfg.dt, np.zeros(n))
    u0 = u0 if u0 is not None else VelocityField.zeros(cfg.grid)
    return InverseProblemData(u0, [g_field] * n, omega, phi, cfg.params, cfg, g0_min)


@pytest.fixture(scope="module")
def omega16():
    return sample_omega(make_case("taylor-vortex-r2"), SMALL.grid)


@pytest.fixture(scope="module")
def built_r2():
    return build_case("taylor-vortex-r2", cfg=SMALL)


# ---------------------------------------------------------------------------
# observation, g1 and phi'
# ---------------------------------------------------------------------------

def test_observe_examples(omega16):
    assert observe(omega16, omega16) == pytest.approx(inner_product(omega16, omega16), rel=1e-15)
    d = VelocityField.from_stream_function(SMALL.grid, lambda x, y: np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * y) ** 2)
    d = d - (inner_product(d, omega16) / inner_product(omega16, omega16)) * omega16
    assert abs(observe(d, omega16)) < 1e-12


def test_observe_matches_quadrature_oracle():
    case = make_case("taylor-vortex-r2")
    t = 0.3

    def integrand(y, x):
        ux, uy = case.velocity(x, y, t)
        wx, wy = case.omega(x, y)
        return ux * wx + uy * wy

    exact, _ = integrate.dblquad(integrand, 0, 1, 0, 1, epsabs=1e-13, epsrel=1e-13)
    errs = []
    for n in (16, 32):
        g = Grid(n, n)
        errs.append(abs(observe(sample_velocity(case, g, t), sample_omega(case, g)) - exact))
    # within the O(h^2) allowance; for these trigonometric fields the midpoint sums are exact
    assert errs[0] <= (1 / 16) ** 2 * abs(exact)
    assert max(errs) < 1e-10


def test_g1_static_weight_is_constant(omega16):
    data = static_data(omega16, omega16)
    g1 = g1_series(data).samples
    assert np.allclose(g1, inner_product(omega16, omega16), rtol=1e-14, atol=0)


def test_g1_orthogonal_weight_rejected(omega16):
    d = VelocityField.from_stream_function(SMALL.grid, lambda x, y: np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * y) ** 2)
    d = d - (inner_product(d, omega16) / inner_product(omega16, omega16)) * omega16
    with pytest.raises(AdmissibilityError, match="t = 0"):
        static_data(d, omega16)


def test_g1_matches_manufactured_oracle(built_r2):
    case, data = built_r2.case, built_r2.data
    # g(t) pairs with omega through the same exact quadrature as the velocity
    for n in (0, 4, 10):
        t = n * SMALL.dt
        ref = inner_product(data.g_at(n), sample_omega(case, SMALL.grid))
        assert data.g1[n] == pytest.approx(ref, rel=1e-14)


def test_phi_derivative_examples():
    dt = 0.05
    const = TimeSeries(0.0, dt, np.full(11, 2.5))
    assert np.all(phi_derivative(const).samples == 0)
    lin = TimeSeries.from_function(lambda t: t, dt, 11)
    assert np.allclose(phi_derivative(lin).samples, 1.0, rtol=0, atol=1e-13)
    with pytest.raises(DomainError):
        phi_derivative(TimeSeries(0.0, dt, np.ones(2)))


def test_phi_derivative_second_order_on_sine():
    errs = []
    for dt in (0.02, 0.01, 0.005):
        ts = TimeSeries.from_function(np.sin, dt, int(round(1 / dt)) + 1)
        errs.append(np.abs(phi_derivative(ts).samples - np.cos(ts.times)).max())
    for a, b in zip(errs, errs[1:]):
        assert a / b == pytest.approx(4.0, rel=0.1)


def test_data_validation(omega16):
    n = SMALL.nsteps + 1
    with pytest.raises(DomainError):
        static_data(omega16, omega16, phi=TimeSeries(0.0, SMALL.dt, np.zeros(n - 1)))
    with pytest.raises(DomainError):
        static_data(omega16, omega16, g0_min=0.0)
    with pytest.raises(AdmissibilityError, match="incompatible"):
        static_data(omega16, omega16, phi=TimeSeries(0.0, SMALL.dt, np.full(n, 0.5)))
    not_div_free = VelocityField.from_functions(SMALL.grid, lambda x, y: x * (1 - x), lambda x, y: 0 * x)
    with pytest.raises(AdmissibilityError, match="divergence"):
        static_data(omega16, not_div_free)


# ---------------------------------------------------------------------------
# operator A
# ---------------------------------------------------------------------------

def test_apply_A_zero_data(omega16):
    data = static_data(omega16, omega16)
    out = apply_A(TimeSeries(0.0, SMALL.dt, np.zeros(SMALL.nsteps + 1)), data)
    assert np.all(out.samples == 0)


def test_apply_A_reproduces_exact_source():
    errs = []
    for nx, dt in ((16, 2e-2), (32, 1e-2)):
        built = build_case("taylor-vortex-r2", cfg=SolverConfig(Grid(nx, nx), dt, 0.2, CASE_PARAMS))
        errs.append(rel_l2(apply_A(built.f_exact, built.data), built.f_exact))
    assert errs[1] < 2e-2
    assert errs[1] < errs[0]


def test_apply_A_local_contraction(built_r2):
    f = built_r2.f_exact
    delta = f.with_samples(0.1 * np.sin(np.pi * f.times / SMALL.T))
    a0 = apply_A(f, built_r2.data)
    a1 = apply_A(f.with_samples(f.samples + delta.samples), built_r2.data)
    kappa = a1.with_samples(a1.samples - a0.samples).l2_norm() / delta.l2_norm()
    assert kappa < 1
    assert measured_contraction(built_r2.data) < 1


# ---------------------------------------------------------------------------
# fixed-point and marching solvers
# ---------------------------------------------------------------------------

def test_picard_recovers_zero_source(omega16):
    data = static_data(omega16, omega16)
    f, rep = solve_inverse_picard(data)
    assert rep.converged
    assert np.all(f.samples == 0)


def test_picard_manufactured(built_r2):
    tol = 1e-10
    f, rep = solve_inverse_picard(built_r2.data, tol=tol)
    assert rep.converged and not rep.diverging
    assert rep.relative_residuals[-1] <= tol
    assert all(r >= 0 for r in rep.residuals)
    assert max(rep.contraction_ratios[1:]) < 1  # geometric decay after the first iterate
    # fixed point and ball centre
    Af = apply_A(f, built_r2.data)
    assert Af.with_samples(Af.samples - f.samples).l2_norm() <= 10 * tol * f.l2_norm()
    assert np.array_equal(rep.ball_center.samples, ball_center(built_r2.data).samples)
    assert np.array_equal(rep.iterates[0].samples, rep.ball_center.samples)
    # the flow it drives reproduces the measurement
    traj = solve_direct(built_r2.data.u0, f, built_r2.data.g, SMALL)
    meas = np.array([observe(u, built_r2.data.omega) for u in traj.snapshots])
    assert np.abs(meas - built_r2.data.phi.samples).max() < 1e-3


def test_picard_unique_from_other_start(built_r2):
    tol = 1e-10
    f1, _ = solve_inverse_picard(built_r2.data, tol=tol)
    c = ball_center(built_r2.data)
    d = np.random.default_rng(3).standard_normal(len(c))
    d /= c.with_samples(d).l2_norm()
    f2, rep = solve_inverse_picard(built_r2.data, tol=tol, f_start=c.with_samples(c.samples + d))
    assert rep.converged
    assert rel_l2(f2, f1) <= 100 * tol


def test_picard_reports_nonconvergence(built_r2):
    f, rep = solve_inverse_picard(built_r2.data, tol=1e-14, max_iter=2)
    assert not rep.converged
    assert rep.iterations == 2
    json.dumps(rep.to_dict())


def test_marching_zero_source(omega16):
    f = solve_inverse_marching(static_data(omega16, omega16))
    assert np.allclose(f.samples, 0.0, atol=1e-14)


@pytest.mark.parametrize("name", ["taylor-vortex-r1", "taylor-vortex-r2"])
def test_marching_matches_picard(name):
    built = build_case(name, cfg=SMALL)
    fp, _ = solve_inverse_picard(built.data, tol=1e-13, max_iter=200)
    fm = solve_inverse_marching(built.data)
    assert rel_l2(fm, fp) <= 1e-8


# ---------------------------------------------------------------------------
# admissibility diagnostics
# ---------------------------------------------------------------------------

def test_admissibility_zero_data(built_r2):
    norms = dict(data_norms(built_r2.data), u0=0.0, g_sup=0.0)
    for r in (1.0, 2.0, 2.5, 3.0):
        rep = admissibility_from_norms(norms, r, 0.25)
        bound = rep.m1 if r > 2 else rep.m2
        assert bound == 0.0 and rep.self_map_satisfied
        assert rep.contraction_factor == 0.0


def test_admissibility_m1_decreases_to_zero_with_T(built_r2):
    norms = data_norms(built_r2.data)
    Ts = np.geomspace(1e-16, 1.0, 40)
    for r in (2.25, 2.5, 2.75):
        m1 = np.array([admissibility_from_norms(norms, r, T).m1 for T in Ts])
        assert np.all(np.diff(m1) > 0)
        # small-T behaviour m1 ~ T^((3-r)/(2(r-1))), a positive power, so m1 -> 0
        slope = math.log(m1[1] / m1[0]) / math.log(Ts[1] / Ts[0])
        assert slope == pytest.approx((3 - r) / (2 * (r - 1)), rel=1e-2)


def test_admissibility_r3_last_term_T_independent(built_r2):
    # with u0 and g fixed in the bracket factors, m1^2 = c T + d for r = 3
    norms = dict(data_norms(built_r2.data), g_sup=0.0)
    Ts = np.array([0.1, 0.2, 0.4])
    sq = np.array([admissibility_from_norms(norms, 3.0, T).m1 ** 2 for T in Ts])
    slope = (sq[1] - sq[0]) / (Ts[1] - Ts[0])
    assert sq[2] == pytest.approx(sq[0] + slope * (Ts[2] - Ts[0]), rel=1e-12)
    d = sq[0] - slope * Ts[0]
    h2, u0, g0 = norms["omega_h2"], norms["u0"], norms["g0"]
    assert d == pytest.approx((h2 * u0**2 / g0) ** 2, rel=1e-12)
    # for r < 3 the same quantity vanishes as T -> 0
    assert admissibility_from_norms(norms, 2.5, 1e-18).m1 < 2e-3 * math.sqrt(d)


def test_admissibility_report(built_r2):
    rep = admissibility(built_r2.data, a=1.0)
    d = rep.to_dict()
    assert d["label"].startswith("sufficient-condition surrogate")
    assert d["a_tilde"] == pytest.approx(1.0 + ball_center(built_r2.data).l2_norm())
    for key in ("m2", "m6", "contraction_factor"):
        assert d[key] >= 0
    assert d["m1"] is None and d["regime"] == "r in [1,2]"
    json.dumps(d)
    with pytest.raises(DomainError):
        admissibility(built_r2.data, a=0.0)
