"""Time integration of the damped incompressible flow problem

    u_t - mu*lap(u) + (u.grad)u + alpha*u + beta*|u|^(r-1) u + grad(p) = f(t) g(x, t)
    div(u) = 0,   u = 0 on the walls,   u(0) = u0

by first-order IMEX Euler with a projection step.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np

from .errors import BlowUpError, DomainError, StabilityLimitError
from .io import atomic_write_bytes, atomic_write_text, format_float
from .fields import (
    Grid,
    HelmholtzSolver,
    ScalarField,
    TimeSeries,
    VelocityField,
    divergence,
    face_magnitudes,
    laplacian_velocity,
    leray_project,
    solve_poisson_neumann,
)

log = logging.getLogger(__name__)

CFL_LIMIT = 0.5
FORCHHEIMER_LIMIT = 0.5


@dataclass(frozen=True)
class PhysicalParams:
    mu: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    r: float = 2.0

    def __post_init__(self):
        for name in ("mu", "alpha", "beta"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise DomainError(f"{name} must be positive, got {val}")
        if not 1.0 <= self.r <= 3.0:
            raise DomainError(f"absorption exponent r must lie in [1, 3], got {self.r}")


def _step_count(T: float, dt: float) -> int:
    n = round(T / dt)
    if n < 1:
        raise DomainError(f"final time {T} is shorter than the step {dt}")
    # accept either a representable product or a quotient that rounds cleanly
    if abs(n * dt - T) <= 0.5 * math.ulp(T) or abs(T / dt - n) <= 0.5 * math.ulp(n):
        return n
    if abs(T / dt - n) <= 4 * n * np.finfo(float).eps:
        return n
    raise DomainError(f"T = {T} is not an integer multiple of dt = {dt}")


@dataclass(frozen=True)
class SolverConfig:
    grid: Grid
    dt: float
    T: float
    params: PhysicalParams = field(default_factory=PhysicalParams)

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError(f"dt must be positive, got {self.dt}")
        if not self.T >= self.dt:
            raise DomainError(f"T = {self.T} must be at least dt = {self.dt}")
        _step_count(self.T, self.dt)

    @property
    def nsteps(self) -> int:
        return _step_count(self.T, self.dt)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.nsteps + 1)


@dataclass
class Trajectory:
    snapshots: list
    config: SolverConfig

    @property
    def times(self) -> np.ndarray:
        return self.config.dt * np.arange(len(self.snapshots))

    def __len__(self):
        return len(self.snapshots)

    def __getitem__(self, n) -> VelocityField:
        return self.snapshots[n]


Source = Union[Sequence[VelocityField], Callable[[int, float], VelocityField]]


def source_at(g: Source, n: int, t: float) -> VelocityField:
    """Sample a forcing profile given as a sequence (by step) or a callable."""
    if callable(g):
        return g(n, t)
    return g[n]


# ---------------------------------------------------------------------------
# nonlinear terms
# ---------------------------------------------------------------------------

def forchheimer(v: VelocityField, r: float) -> VelocityField:
    """Pointwise |v|^(r-1) v, with |v| from fourth-order transverse interpolation."""
    if not 1.0 <= r <= 3.0:
        raise DomainError(f"r must lie in [1, 3], got {r}")
    if r == 1.0:
        return v.copy()
    mx, my = face_magnitudes(v)
    return VelocityField(mx ** (r - 1) * v.ux, my ** (r - 1) * v.uy, v.grid)


def convection(v: VelocityField) -> VelocityField:
    """Centred advective form of (v.grad)v on the staggered grid.

    Each derivative is a half-cell difference multiplied by the advecting
    velocity interpolated to the same point, then averaged back to the face.
    For discretely divergence-free fields this form satisfies
    ``<convection(v), v> = 0`` up to rounding.
    """
    g = v.grid
    ux, uy = v.ux, v.uy
    hx, hy = g.hx, g.hy

    # x-momentum on interior x-faces
    U_c = 0.5 * (ux[1:, :] + ux[:-1, :])                 # (nx, ny) cell centres
    dU_c = (ux[1:, :] - ux[:-1, :]) / hx
    ax = U_c * dU_c                                        # flux products at centres
    cx = np.zeros_like(ux)
    cx[1:-1, :] = 0.5 * (ax[1:, :] + ax[:-1, :])

    V_n = 0.5 * (uy[1:, :] + uy[:-1, :])                  # (nx-1, ny+1) at interior nodes
    ui = ux[1:-1, :]
    pu = np.concatenate([-ui[:, :1], ui, -ui[:, -1:]], axis=1)
    dU_n = (pu[:, 1:] - pu[:, :-1]) / hy                   # (nx-1, ny+1)
    bx = V_n * dU_n
    cx[1:-1, :] += 0.5 * (bx[:, 1:] + bx[:, :-1])

    # y-momentum on interior y-faces
    V_c = 0.5 * (uy[:, 1:] + uy[:, :-1])
    dV_c = (uy[:, 1:] - uy[:, :-1]) / hy
    ay = V_c * dV_c
    cy = np.zeros_like(uy)
    cy[:, 1:-1] = 0.5 * (ay[:, 1:] + ay[:, :-1])

    U_n = 0.5 * (ux[:, 1:] + ux[:, :-1])                  # (nx+1, ny-1)
    vi = uy[:, 1:-1]
    pv = np.concatenate([-vi[:1, :], vi, -vi[-1:, :]], axis=0)
    dV_n = (pv[1:, :] - pv[:-1, :]) / hx                   # (nx+1, ny-1)
    by = U_n * dV_n
    cy[:, 1:-1] += 0.5 * (by[1:, :] + by[:-1, :])
    return VelocityField(cx, cy, g)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

class StepResult(NamedTuple):
    u_next: VelocityField
    u_star: VelocityField
    phi: ScalarField
    transport: VelocityField


class Stepper:
    """IMEX Euler step with a cached Helmholtz factorisation for one config."""

    def __init__(self, cfg: SolverConfig):
        self.cfg = cfg
        p = cfg.params
        self.helmholtz = HelmholtzSolver(cfg.grid, 1.0 + cfg.dt * p.alpha, cfg.dt * p.mu)

    def check_limits(self, u: VelocityField, t: float):
        cfg, p = self.cfg, self.cfg.params
        umax = u.max_abs()
        h = min(cfg.grid.hx, cfg.grid.hy)
        if umax > 0 and cfg.dt > CFL_LIMIT * h / umax:
            raise StabilityLimitError(
                f"convective limit violated at t = {t:.6g}: dt = {cfg.dt:.3g} > {CFL_LIMIT}*h/max|u| = {CFL_LIMIT * h / umax:.3g}"
            )
        if p.r > 1:
            mx, my = face_magnitudes(u)
            m = max(mx.max(), my.max())
            if cfg.dt * p.beta * m ** (p.r - 1) > FORCHHEIMER_LIMIT:
                raise StabilityLimitError(
                    f"Forchheimer limit violated at t = {t:.6g}: dt*beta*max|u|^(r-1) = {cfg.dt * p.beta * m ** (p.r - 1):.3g}"
                )

    def transport(self, u_n: VelocityField) -> VelocityField:
        """Explicit terms (u.grad)u + beta*|u|^(r-1)u at the old level."""
        p = self.cfg.params
        return convection(u_n) + p.beta * forchheimer(u_n, p.r)

    def advance(self, u_n: VelocityField, f_n1: float, g_n1: VelocityField,
                transport: VelocityField | None = None) -> StepResult:
        """One step.

        ``u_star`` in the result is the Helmholtz solution before projection
        and ``phi`` the projection potential, ``u_star - u_next = grad(phi)``.
        """
        if transport is None:
            transport = self.transport(u_n)
        w = u_n - self.cfg.dt * transport
        if f_n1 != 0.0:
            w = w + (self.cfg.dt * f_n1) * g_n1
        u_star = self.helmholtz.solve(w)
        u_next, phi = leray_project(u_star, return_potential=True)
        return StepResult(u_next, u_star, phi, transport)


def step(u_n: VelocityField, f_n1: float, g_n1: VelocityField, cfg: SolverConfig,
         stepper: Stepper | None = None) -> VelocityField:
    """Advance one time step from ``u_n`` with forcing ``f_n1 * g_n1``."""
    stepper = stepper or Stepper(cfg)
    return stepper.advance(u_n, f_n1, g_n1).u_next


def solve_direct(u0: VelocityField, f: TimeSeries, g: Source, cfg: SolverConfig,
                 observer: Callable | None = None, check_limits: bool = True) -> Trajectory:
    """Integrate from ``u0`` (projected first) to ``T``.

    ``f`` must carry one sample per time level.  ``observer``, if given, is
    called as ``observer(n, u_n, result)`` after each step with the
    :class:`StepResult` of step ``n -> n+1``.
    """
    n_steps = cfg.nsteps
    if len(f) != n_steps + 1:
        raise DomainError(f"f has {len(f)} samples, expected {n_steps + 1}")
    if not math.isclose(f.dt, cfg.dt, rel_tol=1e-12):
        raise DomainError(f"f sampled with dt = {f.dt}, solver uses {cfg.dt}")
    if not u0.is_finite():
        raise BlowUpError("initial velocity is not finite", time=0.0)
    stepper = Stepper(cfg)
    u = leray_project(u0)
    snaps = [u]
    for n in range(n_steps):
        t_next = (n + 1) * cfg.dt
        if check_limits:
            stepper.check_limits(u, n * cfg.dt)
        res = stepper.advance(u, float(f.samples[n + 1]), source_at(g, n + 1, t_next))
        u_next = res.u_next
        if not u_next.is_finite():
            raise BlowUpError(f"non-finite velocity at t = {t_next:.6g}", time=t_next)
        if observer is not None:
            observer(n, u, res)
        snaps.append(u_next)
        u = u_next
    log.debug("direct solve finished: %d steps on %dx%d", n_steps, cfg.grid.nx, cfg.grid.ny)
    return Trajectory(snaps, cfg)


def recover_pressure(u_n: VelocityField, u_n1: VelocityField, f_n1: float, g_n1: VelocityField,
                     cfg: SolverConfig) -> ScalarField:
    """Mean-zero pressure at the new time level from the pressure Poisson equation.

    Solves ``-lap(p) = div[(u.grad)u + beta*|u|^(r-1)u - mu*lap(u) - f*g]``
    with the nonlinear terms at ``u_n`` (as in the step) and the viscous term
    at ``u_n1``.  The time derivative and the linear damping are discretely
    divergence-free and drop out.  The discrete Laplacian of a divergence-free
    field is not divergence-free next to the walls, so the viscous term is
    kept.
    """
    p = cfg.params
    flux = convection(u_n) + p.beta * forchheimer(u_n, p.r) - p.mu * laplacian_velocity(u_n1)
    if f_n1 != 0.0:
        flux = flux - f_n1 * g_n1
    rhs = divergence(flux)
    rhs.values *= -1.0
    sol = solve_poisson_neumann(rhs)
    sol.values -= sol.values.mean()
    return sol


def pressure_series(traj: Trajectory, f: TimeSeries, g: Source) -> list:
    """Pressure at every level ``n >= 1`` of a trajectory."""
    cfg = traj.config
    return [
        recover_pressure(traj[n], traj[n + 1], float(f.samples[n + 1]), source_at(g, n + 1, (n + 1) * cfg.dt), cfg)
        for n in range(len(traj) - 1)
    ]


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_trajectory(traj: Trajectory, path, fmt: str = "csv") -> Path:
    """Write one record per snapshot: ``t``, then ``ux.ravel()``, then ``uy.ravel()``.

    Arrays are flattened in C order with shapes ``(nx+1, ny)`` and
    ``(nx, ny+1)``.  ``fmt="bin"`` writes a little-endian header of three
    int32 (nx, ny, count) followed by float64 records.
    """
    path = Path(path)
    g = traj.config.grid
    if fmt == "csv":
        lines = []
        for t, u in zip(traj.times, traj.snapshots):
            row = np.concatenate([[t], u.flat()])
            lines.append(",".join(format_float(x) for x in row))
        atomic_write_text(path, "\n".join(lines) + "\n")
    elif fmt == "bin":
        header = struct.pack("<3i", g.nx, g.ny, len(traj))
        body = b"".join(
            np.concatenate([[t], u.flat()]).astype("<f8").tobytes() for t, u in zip(traj.times, traj.snapshots)
        )
        atomic_write_bytes(path, header + body)
    else:
        raise DomainError(f"unknown trajectory format {fmt!r}")
    return path


def load_trajectory_bin(path, cfg: SolverConfig) -> Trajectory:
    data = Path(path).read_bytes()
    nx, ny, count = struct.unpack("<3i", data[:12])
    g = cfg.grid
    if (nx, ny) != (g.nx, g.ny):
        raise DomainError("trajectory grid does not match config")
    rec = np.frombuffer(data[12:], dtype="<f8").reshape(count, -1)
    nux = (nx + 1) * ny
    snaps = [VelocityField(r[1:1 + nux].reshape(nx + 1, ny), r[1 + nux:].reshape(nx, ny + 1), g) for r in rec]
    return Trajectory(snaps, cfg)
