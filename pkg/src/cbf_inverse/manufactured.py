"""Exact-solution test problems.

Each case fixes a stream function ``psi = A*tau(t)*S(x)*S(y)`` with
``S(z) = sin(pi z)^2``, a pressure ``p = A*tau(t)*cos(pi x)*cos(pi y)``, a source
amplitude ``f(t) = 1 + 0.5*sin(2 pi t)``, and a measurement weight
``omega = curl(S(x)S(y))``.  The spatial profile ``g`` is then defined so the
momentum equation holds exactly, and ``phi(t) = (u(t), omega)``.

Catalogued cases default to weak viscosity and strong Forchheimer damping
(:data:`CASE_PARAMS`).  With ``tau`` linear in time the exact velocity has no
curvature in ``t``, so the only temporal error comes from the explicitly
lagged nonlinear terms; small ``mu`` keeps the viscous truncation error below
that lag at ``nx = 64, dt = 1e-3``.

All derivatives are written out by hand; :func:`verify_closures` checks them
against complex-step differentiation, which is exact to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .direct_solver import PhysicalParams, SolverConfig, Trajectory
from .errors import CatalogError, DomainError
from .fields import Grid, ScalarField, TimeSeries, VelocityField, inner_product, h1_seminorm
from .inverse_solver import InverseProblemData

PI = np.pi
DEFAULT_AMPLITUDE = 0.1
CASE_PARAMS = PhysicalParams(mu=1e-3, alpha=1.0, beta=10.0)


def _S(z):
    return np.sin(PI * z) ** 2


def _S1(z):
    return PI * np.sin(2 * PI * z)


def _S2(z):
    return 2 * PI**2 * np.cos(2 * PI * z)


def _S3(z):
    return -4 * PI**3 * np.sin(2 * PI * z)


def _tau_linear(t):
    return 1.0 + 0.5 * t


def _tau_linear_dot(t):
    return 0.5 + 0.0 * t


def _tau_frozen(t):
    return 1.0 + 0.0 * t


def _tau_frozen_dot(t):
    return 0.0 * t


def source_amplitude(t):
    return 1.0 + 0.5 * np.sin(2 * PI * t)


@dataclass(frozen=True)
class ManufacturedCase:
    name: str
    r: float
    amplitude: float
    tau: Callable
    tau_dot: Callable
    params: PhysicalParams
    f: Callable = source_amplitude
    f_min: float = 0.5
    pressure_amplitude: float = DEFAULT_AMPLITUDE

    # stream function and velocity ------------------------------------------
    def psi(self, x, y, t):
        return self.amplitude * self.tau(t) * _S(x) * _S(y)

    def velocity(self, x, y, t):
        a = self.amplitude * self.tau(t)
        return a * _S(x) * _S1(y), -a * _S1(x) * _S(y)

    def velocity_dt(self, x, y, t):
        a = self.amplitude * self.tau_dot(t)
        return a * _S(x) * _S1(y), -a * _S1(x) * _S(y)

    def velocity_grad(self, x, y, t):
        """((dux/dx, dux/dy), (duy/dx, duy/dy))."""
        a = self.amplitude * self.tau(t)
        return ((a * _S1(x) * _S1(y), a * _S(x) * _S2(y)),
                (-a * _S2(x) * _S(y), -a * _S1(x) * _S1(y)))

    def velocity_laplacian(self, x, y, t):
        a = self.amplitude * self.tau(t)
        lx = a * (_S2(x) * _S1(y) + _S(x) * _S3(y))
        ly = -a * (_S3(x) * _S(y) + _S1(x) * _S2(y))
        return lx, ly

    def pressure(self, x, y, t):
        return self.pressure_amplitude * self.tau(t) * np.cos(PI * x) * np.cos(PI * y)

    def pressure_grad(self, x, y, t):
        a = self.pressure_amplitude * self.tau(t)
        return -a * PI * np.sin(PI * x) * np.cos(PI * y), -a * PI * np.cos(PI * x) * np.sin(PI * y)

    def omega(self, x, y):
        return _S(x) * _S1(y), -_S1(x) * _S(y)

    # derived source ----------------------------------------------------------
    def momentum_terms(self, x, y, t):
        """u_t - mu lap u + (u.grad)u + alpha u + beta |u|^(r-1) u + grad p."""
        p = self.params
        ux, uy = self.velocity(x, y, t)
        utx, uty = self.velocity_dt(x, y, t)
        (dxx, dxy), (dyx, dyy) = self.velocity_grad(x, y, t)
        lx, ly = self.velocity_laplacian(x, y, t)
        px, py = self.pressure_grad(x, y, t)
        mag = np.sqrt(ux * ux + uy * uy)
        damp = mag ** (self.r - 1) if self.r != 1 else 1.0
        rx = utx - p.mu * lx + (ux * dxx + uy * dxy) + p.alpha * ux + p.beta * damp * ux + px
        ry = uty - p.mu * ly + (ux * dyx + uy * dyy) + p.alpha * uy + p.beta * damp * uy + py
        return rx, ry

    def g(self, x, y, t):
        rx, ry = self.momentum_terms(x, y, t)
        ft = self.f(t)
        return rx / ft, ry / ft

    # measurement -------------------------------------------------------------
    def phi(self, t, order: int = 24) -> float:
        """(u(t), omega) by tensor Gauss-Legendre quadrature."""
        xg, wg = np.polynomial.legendre.leggauss(order)
        xg = 0.5 * (xg + 1.0)
        wg = 0.5 * wg
        X, Y = np.meshgrid(xg, xg, indexing="ij")
        W = np.outer(wg, wg)
        ux, uy = self.velocity(X, Y, t)
        wx, wy = self.omega(X, Y)
        return float(np.sum(W * (ux * wx + uy * wy)))

    def phi_dot(self, t, order: int = 24) -> float:
        xg, wg = np.polynomial.legendre.leggauss(order)
        xg = 0.5 * (xg + 1.0)
        wg = 0.5 * wg
        X, Y = np.meshgrid(xg, xg, indexing="ij")
        W = np.outer(wg, wg)
        ux, uy = self.velocity_dt(X, Y, t)
        wx, wy = self.omega(X, Y)
        return float(np.sum(W * (ux * wx + uy * wy)))


def _catalog():
    base = {}
    for r in (1.0, 1.5, 2.0, 2.5, 3.0):
        tag = f"{r:g}"
        base[f"taylor-vortex-r{tag}"] = dict(r=r, tau=_tau_linear, tau_dot=_tau_linear_dot)
    base["taylor-vortex-frozen"] = dict(r=2.0, tau=_tau_frozen, tau_dot=_tau_frozen_dot)
    return base


CATALOG = _catalog()


def list_cases() -> list:
    return sorted(CATALOG)


def make_case(name: str, r: float | None = None, params: PhysicalParams | None = None,
              amplitude: float = DEFAULT_AMPLITUDE) -> ManufacturedCase:
    if name not in CATALOG:
        raise CatalogError(f"unknown case {name!r}; known: {', '.join(list_cases())}")
    entry = CATALOG[name]
    r_use = entry["r"] if r is None else float(r)
    params = replace(params or CASE_PARAMS, r=r_use)
    return ManufacturedCase(name=name, r=r_use, amplitude=amplitude, tau=entry["tau"],
                            tau_dot=entry["tau_dot"], params=params, pressure_amplitude=amplitude)


# ---------------------------------------------------------------------------
# closure self-check
# ---------------------------------------------------------------------------

def _cstep(fn, z, h=1e-30):
    return np.imag(fn(z + 1j * h)) / h


def verify_closures(case: ManufacturedCase, n_points: int = 200, seed: int = 0) -> float:
    """Largest discrepancy between hand-coded and complex-step derivatives.

    Also includes the divergence of the velocity and the momentum residual
    ``momentum_terms - f*g``.  Everything should vanish to rounding.
    """
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 1.0, size=(n_points, 3))
    worst = 0.0
    for x, y, t in pts:
        ux, uy = case.velocity(x, y, t)
        psi_y = _cstep(lambda z: case.psi(x, z, t), y)
        psi_x = _cstep(lambda z: case.psi(z, y, t), x)
        (dxx, dxy), (dyx, dyy) = case.velocity_grad(x, y, t)
        cs = [
            (ux, psi_y), (uy, -psi_x),
            (dxx, _cstep(lambda z: case.velocity(z, y, t)[0], x)),
            (dxy, _cstep(lambda z: case.velocity(x, z, t)[0], y)),
            (dyx, _cstep(lambda z: case.velocity(z, y, t)[1], x)),
            (dyy, _cstep(lambda z: case.velocity(x, z, t)[1], y)),
        ]
        lx, ly = case.velocity_laplacian(x, y, t)
        lap_x = (_cstep(lambda z: case.velocity_grad(z, y, t)[0][0], x)
                 + _cstep(lambda z: case.velocity_grad(x, z, t)[0][1], y))
        lap_y = (_cstep(lambda z: case.velocity_grad(z, y, t)[1][0], x)
                 + _cstep(lambda z: case.velocity_grad(x, z, t)[1][1], y))
        cs += [(lx, lap_x), (ly, lap_y)]
        utx, uty = case.velocity_dt(x, y, t)
        cs += [(utx, _cstep(lambda s: case.velocity(x, y, s)[0], t)),
               (uty, _cstep(lambda s: case.velocity(x, y, s)[1], t))]
        px, py = case.pressure_grad(x, y, t)
        cs += [(px, _cstep(lambda z: case.pressure(z, y, t), x)),
               (py, _cstep(lambda z: case.pressure(x, z, t), y))]
        scale = 1.0 + max(abs(a) for a, _ in cs)
        worst = max(worst, max(abs(a - b) for a, b in cs) / scale)
        worst = max(worst, abs(dxx + dyy) / scale)
        rx, ry = case.momentum_terms(x, y, t)
        gx, gy = case.g(x, y, t)
        ft = case.f(t)
        worst = max(worst, abs(rx - ft * gx) / (1 + abs(rx)), abs(ry - ft * gy) / (1 + abs(ry)))
    return float(worst)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class BuiltCase:
    case: ManufacturedCase
    data: InverseProblemData
    f_exact: TimeSeries
    u_exact: Trajectory
    p_exact: list

    def __iter__(self):
        return iter((self.data, self.f_exact, self.u_exact, self.p_exact))


def sample_velocity(case: ManufacturedCase, grid: Grid, t: float) -> VelocityField:
    return VelocityField.from_functions(grid, lambda x, y: case.velocity(x, y, t)[0],
                                        lambda x, y: case.velocity(x, y, t)[1])


def sample_source(case: ManufacturedCase, grid: Grid, t: float) -> VelocityField:
    return VelocityField.from_functions(grid, lambda x, y: case.g(x, y, t)[0], lambda x, y: case.g(x, y, t)[1])


def sample_omega(case: ManufacturedCase, grid: Grid) -> VelocityField:
    return VelocityField.from_functions(grid, lambda x, y: case.omega(x, y)[0], lambda x, y: case.omega(x, y)[1])


def sample_pressure(case: ManufacturedCase, grid: Grid, t: float) -> ScalarField:
    X, Y = grid.cell_coords()
    return ScalarField(case.pressure(X, Y, t), grid)


def build_case(name: str, r: float | None = None, cfg: SolverConfig | None = None,
               amplitude: float = DEFAULT_AMPLITUDE, g0_margin: float = 0.5,
               check: bool = True) -> BuiltCase:
    """Sample a catalogued case on ``cfg``'s grid and time levels.

    Returns the inverse-problem bundle plus exact ``f``, velocity snapshots
    and pressure fields (pressure at every level, ``p_exact[n]`` at ``t_n``).
    The grid must be square: then the sampled velocity and weight fields are
    discretely divergence-free and their discrete pairing equals the exact
    integral, so the data are compatible to rounding.
    """
    if cfg is None:
        cfg = SolverConfig(Grid(64, 64), 1e-3, 0.25, CASE_PARAMS)
    if cfg.grid.nx != cfg.grid.ny:
        raise DomainError("manufactured cases are sampled on square grids only")
    case = make_case(name, r=r, params=cfg.params, amplitude=amplitude)
    cfg = replace(cfg, params=case.params)
    if check:
        resid = verify_closures(case, n_points=25)
        if resid > 1e-10:
            raise DomainError(f"closure self-check failed for {name}: residual {resid:.2e}")
    grid = cfg.grid
    times = cfg.times
    g_series = [sample_source(case, grid, t) for t in times]
    omega = sample_omega(case, grid)
    u_snaps = [sample_velocity(case, grid, t) for t in times]
    p_exact = [sample_pressure(case, grid, t) for t in times]
    phi = TimeSeries(0.0, cfg.dt, [case.phi(t) for t in times])
    f_exact = TimeSeries(0.0, cfg.dt, case.f(times))
    g1 = np.array([inner_product(gv, omega) for gv in g_series])
    g0_min = g0_margin * float(np.min(np.abs(g1)))
    data = InverseProblemData(u0=u_snaps[0], g=g_series, omega=omega, phi=phi, params=case.params,
                              cfg=cfg, g0_min=g0_min)
    return BuiltCase(case, data, f_exact, Trajectory(u_snaps, cfg), p_exact)


# ---------------------------------------------------------------------------
# error measures
# ---------------------------------------------------------------------------

def direct_error(traj: Trajectory, case) -> dict:
    """Velocity errors of a run against the exact snapshots.

    ``case`` may be a :class:`BuiltCase` or a :class:`ManufacturedCase`.
    """
    if isinstance(case, BuiltCase):
        exact = case.u_exact.snapshots
    else:
        grid = traj.config.grid
        exact = [sample_velocity(case, grid, t) for t in traj.times]
    l2 = np.array([np.sqrt(inner_product(u - e, u - e)) for u, e in zip(traj.snapshots, exact)])
    h1 = np.array([h1_seminorm(u - e) for u, e in zip(traj.snapshots, exact)])
    return {"max_l2": float(l2.max()), "final_l2": float(l2[-1]), "max_h1": float(h1.max()),
            "l2_series": l2}


def inverse_error(f_rec: TimeSeries, case) -> float:
    """Relative L2(0,T) error of a reconstructed amplitude."""
    f_ex = case.f_exact if isinstance(case, BuiltCase) else TimeSeries(f_rec.t0, f_rec.dt, case.f(f_rec.times))
    diff = f_rec.with_samples(f_rec.samples - f_ex.samples)
    return diff.l2_norm() / f_ex.l2_norm()
