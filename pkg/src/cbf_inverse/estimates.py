"""Discrete checks of the a-priori estimates and the Lipschitz-stability experiment.

Time integrals use the right-endpoint rectangle rule, the same rule the time
stepper applies to the forcing.  Energy-type bounds are checked level by
level: the left side accumulates integrals up to ``t_n`` and the worst level
is reported.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .direct_solver import PhysicalParams, Trajectory, pressure_series, source_at
from .fields import (
    TimeSeries,
    VelocityField,
    face_vectors,
    h1_seminorm,
    inner_product,
    lp_norm,
)
from .inverse_solver import InverseProblemData, apply_A, solve_inverse_picard

log = logging.getLogger(__name__)

DEFAULT_SLACK = 0.05
ALGEBRAIC_TOL = 1e-12


@dataclass
class EstimateCheck:
    name: str
    lhs: float
    rhs: float
    slack_allowed: float
    passed: bool = field(init=False)
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        self.passed = bool(self.lhs <= self.rhs * (1.0 + self.slack_allowed))

    @property
    def margin(self) -> float:
        """Fraction of the right side left unused (negative when violated)."""
        return 1.0 - self.lhs / self.rhs if self.rhs else (0.0 if self.lhs <= 0 else -math.inf)

    def to_dict(self) -> dict:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "slack_allowed": self.slack_allowed,
                "passed": self.passed, "margin": self.margin, "context": dict(self.context)}


def _norm(v: VelocityField) -> float:
    return math.sqrt(inner_product(v, v))


def _g_norms(g, n_levels: int, dt: float) -> np.ndarray:
    return np.array([_norm(source_at(g, n, n * dt)) for n in range(n_levels)])


def _worst_level(lhs: np.ndarray, rhs: np.ndarray) -> int:
    """Level with the largest lhs/rhs ratio; level 0 only for single-level runs.

    At level 0 both sides reduce to the initial energy, so it carries no
    information once later levels exist.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
    if len(ratio) == 1:
        return 0
    return 1 + int(np.argmax(ratio[1:]))


# ---------------------------------------------------------------------------
# energy bounds for one run
# ---------------------------------------------------------------------------

def check_energy_sup_bound(traj: Trajectory, f: TimeSeries, g, slack: float = DEFAULT_SLACK,
                    rhs_scale: float = 1.0) -> EstimateCheck:
    """sup_n |u_n| <= |u_0| + sqrt(T) sup_n |g_n| |f|_{L2(0,T)}.

    ``rhs_scale`` multiplies the right side; values below one are used by
    self-tests that must fail.
    """
    cfg = traj.config
    norms = np.array([_norm(u) for u in traj.snapshots])
    gsup = _g_norms(g, len(traj), cfg.dt).max()
    T = cfg.dt * (len(traj) - 1)
    rhs = norms[0] + math.sqrt(T) * gsup * f.l2_norm()
    return EstimateCheck("energy_sup", float(norms.max()), float(rhs * rhs_scale), slack,
                         context={"T": T, "r": cfg.params.r, "nx": cfg.grid.nx, "argmax_t": float(np.argmax(norms) * cfg.dt)})


def energy_terms(traj: Trajectory) -> dict:
    """Per-level |u|^2, |u|_V^2, |u|^2 and |u|_{L^(r+1)}^(r+1)."""
    r = traj.config.params.r
    return {
        "h": np.array([inner_product(u, u) for u in traj.snapshots]),
        "v": np.array([h1_seminorm(u) ** 2 for u in traj.snapshots]),
        "lr": np.array([lp_norm(u, r + 1) ** (r + 1) for u in traj.snapshots]),
    }


def _cumulative(values: np.ndarray, dt: float) -> np.ndarray:
    """Right-endpoint running integral: out[n] = dt * sum_{k=1..n} values[k]."""
    out = np.zeros_like(values)
    out[1:] = dt * np.cumsum(values[1:])
    return out


def check_energy_balance(traj: Trajectory, f: TimeSeries, g, slack: float = DEFAULT_SLACK,
                    rhs_scale: float = 1.0) -> EstimateCheck:
    """|u_n|^2 + int_0^tn (2 mu |u|_V^2 + alpha |u|^2 + 2 beta |u|_{r+1}^{r+1})
    <= |u_0|^2 + (1/alpha) int_0^tn f^2 |g|^2, at every level."""
    cfg = traj.config
    p = cfg.params
    e = energy_terms(traj)
    dt = cfg.dt
    lhs = e["h"] + _cumulative(2 * p.mu * e["v"] + p.alpha * e["h"] + 2 * p.beta * e["lr"], dt)
    gn = _g_norms(g, len(traj), dt)
    rhs = (e["h"][0] + _cumulative(f.samples**2 * gn**2, dt) / p.alpha) * rhs_scale
    n = _worst_level(lhs, rhs)
    return EstimateCheck("energy_balance", float(lhs[n]), float(rhs[n]), slack,
                         context={"level": n, "t": n * dt, "r": p.r, "nx": cfg.grid.nx, "T": dt * (len(traj) - 1)})


# ---------------------------------------------------------------------------
# stability of the direct problem
# ---------------------------------------------------------------------------

def check_run_difference(run1: Trajectory, run2: Trajectory, f1: TimeSeries, f2: TimeSeries, g,
                              slack: float = DEFAULT_SLACK, rhs_scale: float = 1.0) -> EstimateCheck:
    """Difference of two runs sharing ``g`` against the Gronwall-type bound.

    Left side, at every level: |w_n|^2 + int (mu |w|_V^2 + alpha |w|^2 +
    beta 2^(2-r) |w|_{r+1}^{r+1}) with w = u1 - u2.  Right side:
    (|w_0|^2 + (1/alpha) sup|g|^2 |f1 - f2|^2) exp((2/mu) int |u2|_V^2).
    """
    cfg = run1.config
    p = cfg.params
    dt = cfg.dt
    r = p.r
    w = [a - b for a, b in zip(run1.snapshots, run2.snapshots)]
    wh = np.array([inner_product(x, x) for x in w])
    wv = np.array([h1_seminorm(x) ** 2 for x in w])
    wl = np.array([lp_norm(x, r + 1) ** (r + 1) for x in w])
    lhs = wh + _cumulative(p.mu * wv + p.alpha * wh + p.beta / 2 ** (r - 2) * wl, dt)
    u2v = np.array([h1_seminorm(u) ** 2 for u in run2.snapshots])
    gronwall = math.exp(min(700.0, 2.0 / p.mu * dt * np.sum(u2v[1:])))
    gsup = _g_norms(g, len(run1), dt).max()
    df = f1.with_samples(f1.samples - f2.samples).l2_norm()
    rhs = (wh[0] + gsup**2 * df**2 / p.alpha) * gronwall * rhs_scale
    n = int(np.argmax(lhs))
    return EstimateCheck("run_difference", float(lhs[n]), float(rhs), slack,
                         context={"level": n, "gronwall_factor": gronwall, "r": r, "nx": cfg.grid.nx,
                                  "T": dt * (len(run1) - 1)})


def check_run_difference_same_start(run1: Trajectory, run2: Trajectory, f1: TimeSeries, f2: TimeSeries, g,
                               slack: float = DEFAULT_SLACK, rhs_scale: float = 1.0) -> EstimateCheck:
    """Equal initial data: sup|w|^2 <= (1/alpha) sup|g|^2 |f1-f2|^2 exp((2/mu) int |u2|_V^2)."""
    cfg = run1.config
    p = cfg.params
    dt = cfg.dt
    wh = np.array([inner_product(a - b, a - b) for a, b in zip(run1.snapshots, run2.snapshots)])
    u2v = np.array([h1_seminorm(u) ** 2 for u in run2.snapshots])
    gronwall = math.exp(min(700.0, 2.0 / p.mu * dt * np.sum(u2v[1:])))
    gsup = _g_norms(g, len(run1), dt).max()
    df = f1.with_samples(f1.samples - f2.samples).l2_norm()
    rhs = gsup**2 * df**2 / p.alpha * gronwall * rhs_scale
    return EstimateCheck("run_difference_same_start", float(wh.max()), float(rhs), slack,
                         context={"initial_gap": float(wh[0]), "gronwall_factor": gronwall, "r": p.r})


# ---------------------------------------------------------------------------
# pointwise algebraic inequalities
# ---------------------------------------------------------------------------

def _power_map(vec: np.ndarray, r: float) -> np.ndarray:
    mag = np.linalg.norm(vec, axis=1)
    if r == 1.0:
        return vec.copy()
    return (mag ** (r - 1))[:, None] * vec


def check_forchheimer_monotonicity(v1: VelocityField, v2: VelocityField, beta: float, r: float,
                           tol: float = ALGEBRAIC_TOL) -> EstimateCheck:
    """beta (h(v1) - h(v2), v1 - v2) >= beta 2^(1-r) |v1 - v2|_{L^(r+1)}^(r+1).

    Both sides are sums over face samples of the full reconstructed vectors,
    so the inequality holds sample by sample.  Reported as ``lhs <= rhs``
    with ``lhs`` the lower bound.
    """
    a, b = face_vectors(v1), face_vectors(v2)
    area = v1.grid.area
    d = a - b
    pair = float(np.sum(np.einsum("ij,ij->i", _power_map(a, r) - _power_map(b, r), d)) * area)
    low = float(np.sum(np.linalg.norm(d, axis=1) ** (r + 1)) * area)
    return EstimateCheck("forchheimer_monotonicity", beta / 2 ** (r - 1) * low, beta * pair, tol, context={"r": r, "beta": beta})


def check_forchheimer_increment(v1: VelocityField, v2: VelocityField, r: float, tol: float = ALGEBRAIC_TOL) -> EstimateCheck:
    """|h(v1) - h(v2)| <= r (|v1| + |v2|)^(r-1) |v1 - v2| at every face sample.

    ``lhs`` is the largest ratio of the two sides over samples, ``rhs`` is one.
    """
    a, b = face_vectors(v1), face_vectors(v2)
    diff = np.linalg.norm(_power_map(a, r) - _power_map(b, r), axis=1)
    bound = r * (np.linalg.norm(a, axis=1) + np.linalg.norm(b, axis=1)) ** (r - 1) * np.linalg.norm(a - b, axis=1)
    mask = bound > 0
    worst = float(np.max(diff[mask] / bound[mask])) if mask.any() else 0.0
    # a zero bound admits only a zero increment
    if np.any(diff[~mask] > 0):
        worst = np.inf
    return EstimateCheck("forchheimer_increment", worst, 1.0, tol, context={"r": r, "samples": int(a.shape[0])})


# ---------------------------------------------------------------------------
# Lipschitz stability of the inverse problem
# ---------------------------------------------------------------------------

QUANTITIES = ("u_sup_h", "u_l2_v", "u_lr", "p_lq", "f_l2")


@dataclass
class StabilityExperiment:
    kind: str
    eps: np.ndarray
    deltas: dict
    slopes: dict
    lipschitz: dict
    partial: bool
    iterations: list

    def rows(self):
        for q in QUANTITIES:
            yield [self.kind, q, float(self.slopes[q]), float(self.lipschitz[q])]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "eps": self.eps.tolist(),
                "deltas": {k: np.asarray(v).tolist() for k, v in self.deltas.items()},
                "slopes": dict(self.slopes), "lipschitz": dict(self.lipschitz), "partial": self.partial,
                "iterations": list(self.iterations)}


def default_direction(kind: str, data: InverseProblemData):
    """Fixed smooth perturbation directions, unit size in the relevant norm.

    ``u0``: discrete curl of ``sin(pi x)^2 sin(2 pi y)^2``, made orthogonal to
    omega so the perturbed data stay compatible.  ``g``: a static smooth field.
    ``phi``: ``sin(pi t / 2T)``-shaped, vanishing at ``t = 0``, unit H1(0,T) norm.
    """
    grid = data.cfg.grid
    if kind == "u0":
        d = VelocityField.from_stream_function(grid, lambda x, y: np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * y) ** 2)
        om = data.omega
        d = d - (inner_product(d, om) / inner_product(om, om)) * om
        return d / _norm(d)
    if kind == "g":
        d = VelocityField.from_functions(grid, lambda x, y: np.sin(np.pi * x) * np.sin(2 * np.pi * y),
                                         lambda x, y: np.cos(np.pi * x) * np.sin(np.pi * y))
        return d / _norm(d)
    if kind == "phi":
        t = data.phi.times
        T = data.cfg.T
        rho = np.sin(np.pi * t / (2 * T))
        drho = np.pi / (2 * T) * np.cos(np.pi * t / (2 * T))
        h1 = math.sqrt(data.phi.with_samples(rho).l2_norm() ** 2 + data.phi.with_samples(drho).l2_norm() ** 2)
        return rho / h1
    raise ValueError(f"unknown perturbation kind {kind!r}")


def perturb(data: InverseProblemData, kind: str, eps: float, direction) -> InverseProblemData:
    if kind == "u0":
        return replace(data, u0=data.u0 + eps * direction)
    if kind == "g":
        g_new = [data.g_at(n) + eps * direction for n in range(data.cfg.nsteps + 1)]
        return replace(data, g=g_new)
    if kind == "phi":
        return replace(data, phi=data.phi.with_samples(data.phi.samples + eps * direction))
    raise ValueError(f"unknown perturbation kind {kind!r}")


@dataclass
class InverseSolution:
    f: TimeSeries
    traj: Trajectory
    pressure: list
    converged: bool
    iterations: int


def solve_and_record(data: InverseProblemData, tol: float = 1e-11, max_iter: int = 100) -> InverseSolution:
    f, rep = solve_inverse_picard(data, tol=tol, max_iter=max_iter)
    _, traj = apply_A(f, data, return_trajectory=True)
    pres = pressure_series(traj, f, data.g)
    return InverseSolution(f, traj, pres, rep.converged, rep.iterations)


def output_deltas(a: InverseSolution, b: InverseSolution, r: float) -> dict:
    dt = a.traj.config.dt
    w = [x - y for x, y in zip(a.traj.snapshots, b.traj.snapshots)]
    wh = np.array([_norm(x) for x in w])
    wv = np.array([h1_seminorm(x) ** 2 for x in w])
    wl = np.array([lp_norm(x, r + 1) ** (r + 1) for x in w])
    q = (r + 1) / r
    dp = np.array([(x - y).norm() ** q for x, y in zip(a.pressure, b.pressure)])
    return {
        "u_sup_h": float(wh.max()),
        "u_l2_v": float(math.sqrt(dt * np.sum(wv[1:]))),
        "u_lr": float((dt * np.sum(wl[1:])) ** (1 / (r + 1))),
        "p_lq": float((dt * np.sum(dp)) ** (1 / q)),
        "f_l2": a.f.with_samples(a.f.samples - b.f.samples).l2_norm(),
    }


def _perturbed_run(args):
    data, kind, eps, direction, tol = args
    return solve_and_record(perturb(data, kind, eps, direction), tol=tol)


def run_stability_experiment(base: InverseProblemData, kind: str, eps_grid: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4),
                             direction=None, tol: float = 1e-11, jobs: int = 1,
                             base_solution: InverseSolution | None = None) -> StabilityExperiment:
    """Perturb one datum along a fixed direction and fit log-log slopes of the output changes."""
    eps = np.asarray(eps_grid, dtype=float)
    if np.any(eps < 0) or np.any(np.diff(eps) >= 0):
        raise ValueError("eps grid must be nonnegative and strictly decreasing")
    if direction is None:
        direction = default_direction(kind, base)
    ref = base_solution or solve_and_record(base, tol=tol)
    args = [(base, kind, float(e), direction, tol) for e in eps]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            sols = list(ex.map(_perturbed_run, args))
    else:
        sols = [_perturbed_run(a) for a in args]
    r = base.params.r
    deltas = {q: np.zeros(len(eps)) for q in QUANTITIES}
    for i, s in enumerate(sols):
        for q, v in output_deltas(s, ref, r).items():
            deltas[q][i] = v
    partial = not (ref.converged and all(s.converged for s in sols))
    slopes, lips = {}, {}
    pos = eps > 0
    for q in QUANTITIES:
        d = deltas[q]
        ok = pos & (d > 0)
        slopes[q] = float(np.polyfit(np.log(eps[ok]), np.log(d[ok]), 1)[0]) if ok.sum() >= 2 else float("nan")
        lips[q] = float(np.max(d[pos] / eps[pos])) if pos.any() else 0.0
    return StabilityExperiment(kind, eps, deltas, slopes, lips, partial, [s.iterations for s in sols])


def ledger_payload(checks: Sequence[EstimateCheck]) -> list:
    return [c.to_dict() for c in checks]
