"""Reconstruction of the source amplitude f(t) from the integral measurement

    phi(t) = (u(t), omega)

by fixed-point iteration of

    (A f)(t) = [ mu (grad u, grad omega) + ((u.grad)u, omega) + alpha (u, omega)
                 + beta (|u|^(r-1) u, omega) + phi'(t) ] / g1(t),     g1(t) = (g(t), omega)

where u is the flow driven by f.  A time-marching solver that enforces the
measurement step by step serves as an independent cross-check.

Time levels
-----------
Each term of ``(A f)(t_{n+1})`` is evaluated where the time stepper evaluates
it for step ``n -> n+1``: convection and Forchheimer at ``u_n``, damping at
``u_{n+1}``, and viscosity at the Helmholtz solution before projection.  With
this alignment a fixed point of the discrete operator drives a flow whose
measurement increments equal ``dt * phi'(t_{n+1})``, which is what the
marching solver imposes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .direct_solver import PhysicalParams, SolverConfig, Stepper, convection, forchheimer, solve_direct, source_at
from .errors import AdmissibilityError, BlowUpError, DomainError, MarchingBreakdown
from .fields import (
    TimeSeries,
    VelocityField,
    divergence,
    gradient_max,
    h1_seminorm,
    inner_product,
    laplacian_velocity,
    leray_project,
)

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
DEFAULT_RADIUS = 1.0
DIVERGENCE_STREAK = 3
SURROGATE_LABEL = "sufficient-condition surrogate (generic constant set to 1)"


@dataclass
class InverseProblemData:
    """Input bundle of the reconstruction problem.

    ``g`` is a sequence with one spatial profile per time level (or a callable
    ``g(n, t)``).  Construction validates the weight, the lower bound on
    ``|g1|`` and the compatibility of ``u0`` with ``phi(0)``.
    """

    u0: VelocityField
    g: Sequence
    omega: VelocityField
    phi: TimeSeries
    params: PhysicalParams
    cfg: SolverConfig
    g0_min: float
    comp_tol: float | None = None

    def __post_init__(self):
        if self.cfg.params != self.params:
            self.cfg = replace(self.cfg, params=self.params)
        n_levels = self.cfg.nsteps + 1
        if len(self.phi) != n_levels:
            raise DomainError(f"phi has {len(self.phi)} samples, expected {n_levels}")
        if not math.isclose(self.phi.dt, self.cfg.dt, rel_tol=1e-12):
            raise DomainError("phi is not sampled at the solver step")
        if not self.g0_min > 0:
            raise DomainError("g0_min must be positive")
        om = self.omega
        if not om.is_finite() or not np.isfinite(gradient_max(om)):
            raise AdmissibilityError("weight omega is not finite")
        scale = max(om.max_abs(), 1e-300) / min(om.grid.hx, om.grid.hy)
        div_max = float(np.abs(divergence(om).values).max())
        if div_max > 1e-10 * max(1.0, scale):
            raise AdmissibilityError(f"weight omega is not divergence-free (max |div| = {div_max:.3e})")
        self._g1 = None
        self._g1 = g1_series(self).samples
        u0p = leray_project(self.u0)
        phi0 = float(self.phi.samples[0])
        tol = self.comp_tol if self.comp_tol is not None else 1e-8 * (1.0 + abs(phi0))
        mismatch = abs(inner_product(u0p, om) - phi0)
        if mismatch > tol:
            raise AdmissibilityError(f"incompatible data: |(u0, omega) - phi(0)| = {mismatch:.3e} > {tol:.3e}")

    @property
    def times(self) -> np.ndarray:
        return self.cfg.times

    def g_at(self, n: int) -> VelocityField:
        return source_at(self.g, n, n * self.cfg.dt)

    @property
    def g1(self) -> np.ndarray:
        return self._g1


@dataclass
class IterationReport:
    iterates: list
    residuals: list
    relative_residuals: list
    contraction_ratios: list
    converged: bool
    diverging: bool
    ball_center: TimeSeries
    ball_radius_used: float
    tol: float
    max_iter: int

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    def to_dict(self, include_iterates: bool = True) -> dict:
        out = {
            "converged": self.converged,
            "diverging": self.diverging,
            "iterations": self.iterations,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "residuals": list(self.residuals),
            "relative_residuals": list(self.relative_residuals),
            "contraction_ratios": list(self.contraction_ratios),
            "ball_radius_used": self.ball_radius_used,
            "ball_center": {"t0": self.ball_center.t0, "dt": self.ball_center.dt,
                            "samples": self.ball_center.samples.tolist()},
        }
        if include_iterates:
            out["iterates"] = [it.samples.tolist() for it in self.iterates]
        return out


@dataclass
class AdmissibilityReport:
    r: float
    T: float
    a: float
    a_tilde: float
    regime: str
    m1: float | None
    m2: float | None
    m4: float | None
    m6: float | None
    contraction_factor: float
    k_power: int | None
    self_map_satisfied: bool
    contraction_satisfied: bool
    norms: dict = field(default_factory=dict)
    label: str = SURROGATE_LABEL

    @property
    def self_map_bound(self) -> float:
        return self.m1 if self.m1 is not None else self.m2

    def to_dict(self) -> dict:
        return {
            "label": self.label, "r": self.r, "T": self.T, "a": self.a, "a_tilde": self.a_tilde,
            "regime": self.regime, "m1": self.m1, "m2": self.m2, "m4": self.m4, "m6": self.m6,
            "contraction_factor": self.contraction_factor, "k_power": self.k_power,
            "self_map_satisfied": self.self_map_satisfied,
            "contraction_satisfied": self.contraction_satisfied, "norms": dict(self.norms),
        }


# ---------------------------------------------------------------------------
# basic functionals
# ---------------------------------------------------------------------------

def observe(u: VelocityField, omega: VelocityField) -> float:
    return inner_product(u, omega)


def g1_series(data: InverseProblemData) -> TimeSeries:
    """``(g(t_n), omega)`` at every level; raises if any falls below ``g0_min``."""
    if data._g1 is not None:
        return TimeSeries(0.0, data.cfg.dt, data._g1)
    vals = np.array([inner_product(data.g_at(n), data.omega) for n in range(data.cfg.nsteps + 1)])
    bad = np.nonzero(np.abs(vals) < data.g0_min)[0]
    if bad.size:
        n = int(bad[0])
        raise AdmissibilityError(
            f"|g1(t)| = {abs(vals[n]):.3e} below g0_min = {data.g0_min:.3e} at t = {n * data.cfg.dt:.6g}"
        )
    return TimeSeries(0.0, data.cfg.dt, vals)


def phi_derivative(phi: TimeSeries) -> TimeSeries:
    """Second-order finite differences: centred inside, one-sided at the ends."""
    y = phi.samples
    if len(y) < 3:
        raise DomainError(f"phi_derivative needs at least 3 samples, got {len(y)}")
    return phi.with_samples(np.gradient(y, phi.dt, edge_order=2))


def ball_center(data: InverseProblemData) -> TimeSeries:
    return phi_derivative(data.phi).with_samples(phi_derivative(data.phi).samples / data.g1)


# ---------------------------------------------------------------------------
# operator A
# ---------------------------------------------------------------------------

class _Pairings:
    """Pairings with omega reused across applications of A."""

    def __init__(self, data: InverseProblemData):
        self.data = data
        self.omega = data.omega
        self.lap_omega = laplacian_velocity(data.omega)
        self.phi_dot = phi_derivative(data.phi).samples
        self.g1 = data.g1

    def flow_terms(self, u_prev, res, params) -> float:
        """mu(grad u*, grad w) + alpha(u_next, w) + (transport(u_prev), w)."""
        om = self.omega
        visc = -inner_product(res.u_star, self.lap_omega)
        return params.mu * visc + params.alpha * inner_product(res.u_next, om) + inner_product(res.transport, om)

    def initial_terms(self, u0, params) -> float:
        om = self.omega
        trans = convection(u0) + params.beta * forchheimer(u0, params.r)
        return (params.mu * -inner_product(u0, self.lap_omega) + params.alpha * inner_product(u0, om)
                + inner_product(trans, om))


def apply_A(f: TimeSeries, data: InverseProblemData, _pairings: _Pairings | None = None,
            return_trajectory: bool = False):
    """Evaluate the fixed-point operator on a sampled amplitude."""
    pr = _pairings or _Pairings(data)
    params = data.params
    n_levels = data.cfg.nsteps + 1
    terms = np.zeros(n_levels)
    u0p = leray_project(data.u0)
    terms[0] = pr.initial_terms(u0p, params)

    def observer(n, u_prev, res):
        terms[n + 1] = pr.flow_terms(u_prev, res, params)

    traj = solve_direct(data.u0, f, data.g, data.cfg, observer=observer)
    out = f.with_samples((terms + pr.phi_dot) / pr.g1)
    return (out, traj) if return_trajectory else out


def _rel(num: float, den: float) -> float:
    return num / den if den > 0 else num


def solve_inverse_picard(data: InverseProblemData, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                         f_start: TimeSeries | None = None, a: float = DEFAULT_RADIUS):
    """Iterate ``f <- A f`` from the ball centre (or ``f_start``).

    Stops once the relative L2(0,T) change drops to ``tol`` or after
    ``max_iter`` applications, or when the change grows three times in a row
    (flagged as diverging).  Non-convergence is reported, not raised.
    """
    pr = _Pairings(data)
    center = ball_center(data)
    f = f_start if f_start is not None else center
    iterates = [f]
    residuals, rel_res, ratios = [], [], []
    converged = diverging = False
    growth = 0
    for k in range(max_iter):
        f_new = apply_A(f, data, _pairings=pr)
        res = f_new.with_samples(f_new.samples - f.samples).l2_norm()
        rel = _rel(res, f_new.l2_norm())
        if residuals:
            ratios.append(_rel(res, residuals[-1]))
            growth = growth + 1 if res > residuals[-1] else 0
        residuals.append(res)
        rel_res.append(rel)
        iterates.append(f_new)
        f = f_new
        log.info("picard %d: residual %.3e (relative %.3e)", k + 1, res, rel)
        if rel <= tol:
            converged = True
            break
        if growth >= DIVERGENCE_STREAK:
            diverging = True
            log.warning("picard residuals grew %d times in a row; stopping", growth)
            break
    report = IterationReport(iterates, residuals, rel_res, ratios, converged, diverging, center, a, tol, max_iter)
    return f, report


def solve_inverse_marching(data: InverseProblemData, breakdown_tol: float = 1e-12) -> TimeSeries:
    """Choose ``f(t_{n+1})`` per step so that ``(u_{n+1}, omega) = phi(t_{n+1})``.

    The step is affine in the new forcing value and the Helmholtz operator is
    symmetric, so ``(u_{n+1}, omega) = (w_n, H^-1 omega) + f dt (g_{n+1}, H^-1 omega)``
    with ``w_n`` the explicit part of the update.
    """
    cfg, params = data.cfg, data.params
    pr = _Pairings(data)
    stepper = Stepper(cfg)
    resp = stepper.helmholtz.solve(data.omega)
    n_steps = cfg.nsteps
    f = np.zeros(n_steps + 1)
    u = leray_project(data.u0)
    f[0] = (pr.initial_terms(u, params) + pr.phi_dot[0]) / pr.g1[0]
    phi = data.phi.samples
    for n in range(n_steps):
        t_next = (n + 1) * cfg.dt
        stepper.check_limits(u, n * cfg.dt)
        g_next = data.g_at(n + 1)
        trans = stepper.transport(u)
        w = u - cfg.dt * trans
        denom = cfg.dt * inner_product(g_next, resp)
        if abs(denom) < breakdown_tol:
            raise MarchingBreakdown(f"degenerate step response {denom:.3e} at t = {t_next:.6g}")
        f[n + 1] = (phi[n + 1] - inner_product(w, resp)) / denom
        u = stepper.advance(u, float(f[n + 1]), g_next, transport=trans).u_next
        if not u.is_finite():
            raise BlowUpError(f"non-finite velocity at t = {t_next:.6g}", time=t_next)
    return TimeSeries(0.0, cfg.dt, f)


# ---------------------------------------------------------------------------
# admissibility diagnostics
# ---------------------------------------------------------------------------

def data_norms(data: InverseProblemData) -> dict:
    om = data.omega
    n_om = math.sqrt(inner_product(om, om))
    n_grad = h1_seminorm(om)
    lap = laplacian_velocity(om)
    n_lap = math.sqrt(inner_product(lap, lap))
    u0p = leray_project(data.u0)
    return {
        "u0": math.sqrt(inner_product(u0p, u0p)),
        "g_sup": max(math.sqrt(inner_product(data.g_at(n), data.g_at(n))) for n in range(data.cfg.nsteps + 1)),
        "omega": n_om,
        "grad_omega": n_grad,
        "lap_omega": n_lap,
        "grad_omega_inf": gradient_max(om),
        "omega_h2": math.sqrt(n_om**2 + n_grad**2 + n_lap**2),
        "g0": float(np.min(np.abs(data.g1))),
        "center_l2": ball_center(data).l2_norm(),
    }


def _smallest_k(log_q: float, k_max: int = 100000) -> int | None:
    """Smallest k >= 1 with q^k / k! < 1."""
    for k in range(1, k_max + 1):
        if k * log_q - math.lgamma(k + 1) < 0:
            return k
    return None


def admissibility_from_norms(norms: dict, r: float, T: float, a: float = DEFAULT_RADIUS) -> AdmissibilityReport:
    """Closed-form self-map and contraction constants from data norms.

    ``norms`` needs the keys produced by :func:`data_norms`.  The generic
    constant of the underlying estimates is taken as 1.
    """
    if not a > 0:
        raise DomainError(f"ball radius must be positive, got {a}")
    u0, G, g0 = norms["u0"], norms["g_sup"], norms["g0"]
    w, lap, ginf, h2 = norms["omega"], norms["lap_omega"], norms["grad_omega_inf"], norms["omega_h2"]
    at = a + norms["center_l2"]
    lin = u0 + math.sqrt(T) * at * G          # bound on sup |u|_H
    quad = u0**2 + (at * G) ** 2              # bound on the energy
    if g0 <= 0:
        raise AdmissibilityError("g0 must be positive")
    m1 = m2 = m4 = m6 = None
    with np.errstate(over="ignore"):
        growth = math.exp(quad) if quad < 700 else math.inf
    if r > 2:
        regime = "r in (2,3]"
        term1 = T * ((lap + w) * lin + ginf * quad) ** 2
        term2 = T ** ((3 - r) / (r - 1)) * h2**2 * lin ** (4 / (r - 1)) * quad ** (2 * (r - 2) / (r - 1))
        m1 = math.sqrt(term1 + term2) / g0
        m4 = (G**2 / g0**2) * growth * (T ** (r - 2) * (lap + w + ginf * lin) ** 2 + h2**2 * quad ** (r - 1))
        q = m4 * T ** (3 - r)
        bound, satisfied_map = m1, m1 < a
    else:
        regime = "r in [1,2]"
        m2 = math.sqrt(T) / g0 * ((lap + w) * lin + ginf * quad + h2 * lin**r)
        m6 = (G**2 / g0**2) * growth * (lap + w + ginf * lin + h2 * lin ** (r - 1)) ** 2
        q = m6 * T
        bound, satisfied_map = m2, m2 < a
    factor = math.sqrt(q) if math.isfinite(q) else math.inf
    if q == 0:
        k = 1
    elif math.isfinite(q):
        k = _smallest_k(math.log(q))
    else:
        k = None
    return AdmissibilityReport(r=r, T=T, a=a, a_tilde=at, regime=regime, m1=m1, m2=m2, m4=m4, m6=m6,
                               contraction_factor=factor, k_power=k, self_map_satisfied=bool(satisfied_map),
                               contraction_satisfied=bool(factor < 1), norms=dict(norms))


def admissibility(data: InverseProblemData, a: float = DEFAULT_RADIUS) -> AdmissibilityReport:
    return admissibility_from_norms(data_norms(data), data.params.r, data.cfg.T, a)


def measured_contraction(data: InverseProblemData, a: float = DEFAULT_RADIUS, directions: Sequence | None = None) -> float:
    """Largest observed ``|A(c + a d) - A(c)| / |a d|`` over unit directions ``d``.

    ``c`` is the ball centre.  Default directions are a constant and two
    low-order sines in time, each scaled to unit L2(0,T) norm.
    """
    pr = _Pairings(data)
    c = ball_center(data)
    t = c.times
    T = data.cfg.T
    if directions is None:
        directions = [np.ones_like(t), np.sin(np.pi * t / T), np.cos(np.pi * t / T)]
    base = apply_A(c, data, _pairings=pr)
    worst = 0.0
    for d in directions:
        d = np.asarray(d, dtype=float)
        d = d / c.with_samples(d).l2_norm()
        pert = apply_A(c.with_samples(c.samples + a * d), data, _pairings=pr)
        diff = pert.with_samples(pert.samples - base.samples).l2_norm()
        worst = max(worst, diff / a)
    return worst
