"""Staggered (MAC) grid on the unit square with the discrete operators used by
the solvers.

Layout
------
``VelocityField.ux`` has shape ``(nx + 1, ny)``: x-faces at ``x = i*hx``,
``y = (j + 1/2)*hy``.  Rows ``i = 0`` and ``i = nx`` sit on the walls and are
always zero.  ``VelocityField.uy`` has shape ``(nx, ny + 1)`` with wall columns
``j = 0`` and ``j = ny``.  Scalars live at cell centres, shape ``(nx, ny)``.

Every face carries the weight ``hx*hy``.  With this weight the discrete
gradient is exactly minus the adjoint of the discrete divergence, which makes
the Leray projection an orthogonal projector.  Tangential no-slip enters
through odd ghost values (``u_ghost = -u_inside``) in the Laplacian.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import fft

from .errors import DimensionError, DomainError, NumericalError

MIN_CELLS = 8


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise DomainError(f"cell counts must be integers, got {self.nx}x{self.ny}")
        if self.nx < MIN_CELLS or self.ny < MIN_CELLS:
            raise DomainError(f"grid must be at least {MIN_CELLS}x{MIN_CELLS}, got {self.nx}x{self.ny}")

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    @property
    def area(self) -> float:
        """Quadrature weight of one cell (and of one face sample)."""
        return self.hx * self.hy

    def xface_coords(self):
        x = np.arange(self.nx + 1) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def yface_coords(self):
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = np.arange(self.ny + 1) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def cell_coords(self):
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def node_coords(self):
        x = np.arange(self.nx + 1) * self.hx
        y = np.arange(self.ny + 1) * self.hy
        return np.meshgrid(x, y, indexing="ij")


@dataclass
class VelocityField:
    """Face-centred velocity.  Wall-normal samples are forced to zero."""

    ux: np.ndarray
    uy: np.ndarray
    grid: Grid

    def __post_init__(self):
        g = self.grid
        self.ux = np.array(self.ux, dtype=float)
        self.uy = np.array(self.uy, dtype=float)
        if self.ux.shape != (g.nx + 1, g.ny) or self.uy.shape != (g.nx, g.ny + 1):
            raise DimensionError(
                f"velocity arrays {self.ux.shape}, {self.uy.shape} do not fit grid {g.nx}x{g.ny}"
            )
        self.ux[0, :] = 0.0
        self.ux[-1, :] = 0.0
        self.uy[:, 0] = 0.0
        self.uy[:, -1] = 0.0

    @classmethod
    def zeros(cls, grid: Grid) -> "VelocityField":
        return cls(np.zeros((grid.nx + 1, grid.ny)), np.zeros((grid.nx, grid.ny + 1)), grid)

    @classmethod
    def from_functions(cls, grid: Grid, fx: Callable, fy: Callable) -> "VelocityField":
        """Sample ``fx(x, y)`` on x-faces and ``fy(x, y)`` on y-faces."""
        return cls(fx(*grid.xface_coords()), fy(*grid.yface_coords()), grid)

    @classmethod
    def from_stream_function(cls, grid: Grid, psi: Callable) -> "VelocityField":
        """Discrete curl of a nodal stream function.

        The result is divergence-free to rounding; it has zero normal flux when
        ``psi`` is constant along the walls.
        """
        s = psi(*grid.node_coords())
        ux = (s[:, 1:] - s[:, :-1]) / grid.hy
        uy = -(s[1:, :] - s[:-1, :]) / grid.hx
        return cls(ux, uy, grid)

    def copy(self) -> "VelocityField":
        return VelocityField(self.ux.copy(), self.uy.copy(), self.grid)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.ux).all() and np.isfinite(self.uy).all())

    def max_abs(self) -> float:
        return float(max(np.abs(self.ux).max(), np.abs(self.uy).max()))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.ux.ravel(), self.uy.ravel()])

    def _check(self, other):
        if not isinstance(other, VelocityField):
            return NotImplemented
        if other.grid != self.grid:
            raise DimensionError(f"grid mismatch: {self.grid} vs {other.grid}")
        return other

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return VelocityField(self.ux + other.ux, self.uy + other.uy, self.grid)

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return VelocityField(self.ux - other.ux, self.uy - other.uy, self.grid)

    def __mul__(self, c):
        if not np.isscalar(c):
            return NotImplemented
        return VelocityField(c * self.ux, c * self.uy, self.grid)

    __rmul__ = __mul__

    def __neg__(self):
        return VelocityField(-self.ux, -self.uy, self.grid)

    def __truediv__(self, c):
        return self * (1.0 / c)


@dataclass
class ScalarField:
    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.values.shape != (self.grid.nx, self.grid.ny):
            raise DimensionError(f"scalar array {self.values.shape} does not fit grid")

    def mean(self) -> float:
        return float(self.values.mean())

    def norm(self) -> float:
        """L2 norm with cell-area weights."""
        return float(np.sqrt(np.sum(self.values**2) * self.grid.area))

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        if other.grid != self.grid:
            raise DimensionError("grid mismatch")
        return ScalarField(self.values - other.values, self.grid)


@dataclass
class TimeSeries:
    """Uniform samples ``samples[n]`` at ``t0 + n*dt``."""

    t0: float
    dt: float
    samples: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.samples = np.array(self.samples, dtype=float).reshape(-1)
        if not self.dt > 0:
            raise DomainError(f"time step must be positive, got {self.dt}")
        if not np.isfinite(self.samples).all():
            raise DomainError("time series contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.samples))

    @classmethod
    def from_function(cls, fn: Callable, dt: float, n: int, t0: float = 0.0) -> "TimeSeries":
        t = t0 + dt * np.arange(n)
        return cls(t0, dt, np.array([fn(s) for s in t], dtype=float))

    def with_samples(self, samples) -> "TimeSeries":
        return TimeSeries(self.t0, self.dt, samples)

    def l2_norm(self) -> float:
        """L2(0,T) norm by the right-endpoint rectangle rule.

        This is the rule the time stepper applies to the forcing, which only
        ever sees samples ``n >= 1``.
        """
        return float(np.sqrt(self.dt * np.sum(self.samples[1:] ** 2)))


def _same_grid(a, b):
    if a.grid != b.grid:
        raise DimensionError(f"grid mismatch: {a.grid} vs {b.grid}")


# ---------------------------------------------------------------------------
# inner products and norms
# ---------------------------------------------------------------------------

def inner_product(a: VelocityField, b: VelocityField) -> float:
    """Face-sample inner product, weight ``hx*hy`` per sample."""
    _same_grid(a, b)
    return float((np.sum(a.ux * b.ux) + np.sum(a.uy * b.uy)) * a.grid.area)


_MID4 = np.array([-1.0, 9.0, 9.0, -1.0]) / 16.0


def _midpoints4(a: np.ndarray, axis: int) -> np.ndarray:
    """Fourth-order midpoint interpolation along ``axis``; ``a`` carries one ghost per side."""
    n = a.shape[axis] - 3
    return sum(w * np.take(a, range(k, k + n), axis=axis) for k, w in enumerate(_MID4))


def transverse_components(v: VelocityField):
    """``uy`` at x-faces and ``ux`` at y-faces, zero on wall faces.

    Tensor 16-point interpolation, fourth order in the interior.  Ghosts are
    even across the wall a component is normal to (it vanishes there
    quadratically) and odd across the wall it is tangential to (no-slip).
    """
    uy, ux = v.uy, v.ux
    p = np.concatenate([uy[:, 1:2], uy, uy[:, -2:-1]], axis=1)
    uy_c = _midpoints4(p, 1)                                      # cell centres
    p = np.concatenate([-uy_c[:1], uy_c, -uy_c[-1:]], axis=0)
    uy_x = np.zeros_like(ux)
    uy_x[1:-1, :] = _midpoints4(p, 0)
    p = np.concatenate([ux[1:2], ux, ux[-2:-1]], axis=0)
    ux_c = _midpoints4(p, 0)
    p = np.concatenate([-ux_c[:, :1], ux_c, -ux_c[:, -1:]], axis=1)
    ux_y = np.zeros_like(uy)
    ux_y[:, 1:-1] = _midpoints4(p, 1)
    return uy_x, ux_y


def face_magnitudes(v: VelocityField):
    """|v| on x-faces and on y-faces, transverse part from :func:`transverse_components`."""
    uy_x, ux_y = transverse_components(v)
    return np.sqrt(v.ux**2 + uy_x**2), np.sqrt(ux_y**2 + v.uy**2)


def face_vectors(v: VelocityField):
    """Full vectors reconstructed at every face sample, shape ``(m, 2)``.

    Wall faces are left out.  Used by checks of pointwise vector inequalities.
    """
    uy_x, ux_y = transverse_components(v)
    on_x = np.stack([v.ux[1:-1, :].ravel(), uy_x[1:-1, :].ravel()], axis=1)
    on_y = np.stack([ux_y[:, 1:-1].ravel(), v.uy[:, 1:-1].ravel()], axis=1)
    return np.concatenate([on_x, on_y])


def lp_norm(a: VelocityField, p: float) -> float:
    """Discrete L^p norm of |a|.

    ``p = np.inf`` gives the largest face magnitude.  For finite ``p`` each
    component sample is weighted by the local magnitude,
    ``sum |a|^(p-2) a_i^2 * area``, so that ``p = 2`` reproduces
    :func:`inner_product` exactly and ``<|a|^(p-2) a, a>`` equals the p-th
    power of the norm.
    """
    if p == np.inf:
        mx, my = face_magnitudes(a)
        return float(max(mx.max(), my.max()))
    if not p >= 1:
        raise DomainError(f"lp_norm needs p >= 1, got {p}")
    if p == 2:
        return float(np.sqrt(inner_product(a, a)))
    mx, my = face_magnitudes(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        wx = np.where(mx > 0, mx ** (p - 2), 0.0)
        wy = np.where(my > 0, my ** (p - 2), 0.0)
    total = (np.sum(wx * a.ux**2) + np.sum(wy * a.uy**2)) * a.grid.area
    return float(total ** (1.0 / p))


# ---------------------------------------------------------------------------
# differential operators
# ---------------------------------------------------------------------------

def gradient(s: ScalarField) -> VelocityField:
    g = s.grid
    gx = np.zeros((g.nx + 1, g.ny))
    gy = np.zeros((g.nx, g.ny + 1))
    gx[1:-1, :] = (s.values[1:, :] - s.values[:-1, :]) / g.hx
    gy[:, 1:-1] = (s.values[:, 1:] - s.values[:, :-1]) / g.hy
    return VelocityField(gx, gy, g)


def divergence(v: VelocityField) -> ScalarField:
    g = v.grid
    d = (v.ux[1:, :] - v.ux[:-1, :]) / g.hx + (v.uy[:, 1:] - v.uy[:, :-1]) / g.hy
    return ScalarField(d, g)


def _pad_tangential(a: np.ndarray, axis: int) -> np.ndarray:
    """Append odd ghost layers along ``axis`` (wall value zero)."""
    first = -np.take(a, [0], axis=axis)
    last = -np.take(a, [-1], axis=axis)
    return np.concatenate([first, a, last], axis=axis)


def laplacian_velocity(v: VelocityField) -> VelocityField:
    """Five-point Laplacian per component, no-slip via odd ghost values."""
    g = v.grid
    ux = v.ux
    lx = np.zeros_like(ux)
    lx[1:-1, :] = (ux[2:, :] - 2 * ux[1:-1, :] + ux[:-2, :]) / g.hx**2
    pu = _pad_tangential(ux, 1)
    lx[1:-1, :] += (pu[1:-1, 2:] - 2 * pu[1:-1, 1:-1] + pu[1:-1, :-2]) / g.hy**2

    uy = v.uy
    ly = np.zeros_like(uy)
    ly[:, 1:-1] = (uy[:, 2:] - 2 * uy[:, 1:-1] + uy[:, :-2]) / g.hy**2
    pv = _pad_tangential(uy, 0)
    ly[:, 1:-1] += (pv[2:, 1:-1] - 2 * pv[1:-1, 1:-1] + pv[:-2, 1:-1]) / g.hx**2
    return VelocityField(lx, ly, g)


def velocity_gradients(v: VelocityField):
    """Difference quotients behind :func:`laplacian_velocity` with their weights.

    Returns a list of ``(values, weights)`` pairs.  Differences across a wall
    use the odd ghost value and carry half a cell of weight, which makes
    ``sum(w * d**2) == -<laplacian(v), v>`` hold exactly.
    """
    g = v.grid
    a = g.area
    out = []
    # d(ux)/dx at cell centres
    out.append(((v.ux[1:, :] - v.ux[:-1, :]) / g.hx, np.full((g.nx, g.ny), a)))
    # d(ux)/dy at nodes (interior x-faces only; wall rows of ux are zero)
    pu = _pad_tangential(v.ux[1:-1, :], 1)
    dy = (pu[:, 1:] - pu[:, :-1]) / g.hy
    w = np.full(dy.shape, a)
    w[:, 0] = w[:, -1] = 0.5 * a
    out.append((dy, w))
    # d(uy)/dy at cell centres
    out.append(((v.uy[:, 1:] - v.uy[:, :-1]) / g.hy, np.full((g.nx, g.ny), a)))
    pv = _pad_tangential(v.uy[:, 1:-1], 0)
    dx = (pv[1:, :] - pv[:-1, :]) / g.hx
    w = np.full(dx.shape, a)
    w[0, :] = w[-1, :] = 0.5 * a
    out.append((dx, w))
    return out


def h1_inner(a: VelocityField, b: VelocityField) -> float:
    """Discrete Dirichlet form, equal to ``-<laplacian(a), b>``."""
    _same_grid(a, b)
    return float(sum(np.sum(w * da * db) for (da, w), (db, _) in zip(velocity_gradients(a), velocity_gradients(b))))


def h1_seminorm(v: VelocityField) -> float:
    return float(np.sqrt(sum(np.sum(w * d**2) for d, w in velocity_gradients(v))))


def gradient_max(v: VelocityField) -> float:
    """Largest absolute difference quotient of any velocity component."""
    return float(max(np.abs(d).max() for d, _ in velocity_gradients(v)))


# ---------------------------------------------------------------------------
# fast solvers
# ---------------------------------------------------------------------------

def _dirichlet_eigs(n: int, h: float) -> np.ndarray:
    """Eigenvalues of -D2 on n-1 interior nodes with zero end values (DST-I)."""
    k = np.arange(1, n)
    return (2.0 / h * np.sin(np.pi * k / (2 * n))) ** 2


def _ghost_eigs(n: int, h: float) -> np.ndarray:
    """Eigenvalues of -D2 on n cell-centred points with odd ghosts (DST-II)."""
    k = np.arange(1, n + 1)
    return (2.0 / h * np.sin(np.pi * k / (2 * n))) ** 2


def _neumann_eigs(n: int, h: float) -> np.ndarray:
    """Eigenvalues of -D2 on n cell-centred points with even ghosts (DCT-II)."""
    k = np.arange(n)
    return (2.0 / h * np.sin(np.pi * k / (2 * n))) ** 2


def solve_poisson_neumann(rhs: ScalarField) -> ScalarField:
    """Solve ``divergence(gradient(phi)) = rhs`` with zero-mean ``phi``.

    The mean of ``rhs`` (zero for any discrete divergence) is discarded.
    """
    g = rhs.grid
    lam = _neumann_eigs(g.nx, g.hx)[:, None] + _neumann_eigs(g.ny, g.hy)[None, :]
    r_hat = fft.dctn(rhs.values, type=2, norm="ortho")
    lam[0, 0] = 1.0
    phi_hat = -r_hat / lam
    phi_hat[0, 0] = 0.0
    phi = fft.idctn(phi_hat, type=2, norm="ortho")
    return ScalarField(phi, g)


def leray_project(v: VelocityField, return_potential: bool = False, check: bool = True):
    """Discrete Helmholtz-Hodge projection ``v - grad(phi)``.

    ``phi`` solves the Neumann problem ``div grad phi = div v``.  With
    ``return_potential`` the pair ``(projected, phi)`` is returned.
    """
    div_v = divergence(v)
    phi = solve_poisson_neumann(div_v)
    w = v - gradient(phi)
    if check:
        res = np.abs(divergence(w).values).max()
        scale = max(1.0, np.abs(div_v.values).max())
        # non-finite input is the caller's blow-up to report, not a solver failure
        if np.isfinite(res) and not res <= 1e-10 * scale:
            raise NumericalError(f"projection left divergence {res:.3e}", residual=float(res))
    return (w, phi) if return_potential else w


class HelmholtzSolver:
    """Solve ``(c0 I - c1 laplacian_velocity) u = rhs`` per component.

    ``c0 > 0`` and ``c1 >= 0``; the diagonalisation is exact for the
    discrete Laplacian above (sine transforms in both directions).
    """

    def __init__(self, grid: Grid, c0: float, c1: float):
        g = grid
        self.grid = g
        lx = _dirichlet_eigs(g.nx, g.hx)[:, None] + _ghost_eigs(g.ny, g.hy)[None, :]
        ly = _ghost_eigs(g.nx, g.hx)[:, None] + _dirichlet_eigs(g.ny, g.hy)[None, :]
        self._den_x = c0 + c1 * lx
        self._den_y = c0 + c1 * ly

    def solve(self, rhs: VelocityField) -> VelocityField:
        g = self.grid
        bx = rhs.ux[1:-1, :]
        hx = fft.dst(fft.dst(bx, type=1, axis=0, norm="ortho"), type=2, axis=1, norm="ortho")
        hx /= self._den_x
        ux = np.zeros((g.nx + 1, g.ny))
        ux[1:-1, :] = fft.idst(fft.idst(hx, type=2, axis=1, norm="ortho"), type=1, axis=0, norm="ortho")

        by = rhs.uy[:, 1:-1]
        hy = fft.dst(fft.dst(by, type=2, axis=0, norm="ortho"), type=1, axis=1, norm="ortho")
        hy /= self._den_y
        uy = np.zeros((g.nx, g.ny + 1))
        uy[:, 1:-1] = fft.idst(fft.idst(hy, type=1, axis=1, norm="ortho"), type=2, axis=0, norm="ortho")
        return VelocityField(ux, uy, g)
