"""Batch front end: ``cbf-inverse --config run.ini [--mode M] [--out DIR]``.

Config grammar (INI, ``;`` or ``#`` comments, keys case-insensitive)::

    [run]       mode = direct | inverse | verify | sweep
                case = taylor-vortex-r2     ; catalogued manufactured case
                r = 2.0                     ; optional exponent override
                amplitude = 0.1
                seed = 42
                jobs = 1
    [grid]      nx = 64                     ; ny defaults to nx
    [time]      dt = 1e-3
                T = 0.25
    [physics]   mu = 1e-3, alpha = 1, beta = 10  (one key per line)
    [inverse]   tol = 1e-8, max_iter = 100, radius = 1.0
                phi_file = path.csv         ; optional measured phi replacing the case's
    [direct]    f_file = path.csv           ; optional amplitude replacing the exact one
                trajectory_format = csv | bin | none
    [verify]    slack = 0.05, pairs = 200, stability = yes,
                eps = 1e-1, 1e-2, 1e-3, 1e-4
    [sweep]     T_values = 0.05, 0.1, 0.2, 0.4, 0.8
                r_values = 2.5

Command-line flags override the matching ``[run]`` keys.  Exit codes:
0 success, 2 bad config, 3 numerical failure (blow-up, stability limit),
4 non-convergence or failed checks (artifacts are still written).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .direct_solver import PhysicalParams, SolverConfig, export_trajectory, solve_direct
from .errors import AdmissibilityError, CatalogError, CBFError, ConfigError, DomainError, NumericalError
from .estimates import (
    EstimateCheck,
    check_run_difference,
    check_run_difference_same_start,
    check_energy_sup_bound,
    check_energy_balance,
    check_forchheimer_monotonicity,
    check_forchheimer_increment,
    run_stability_experiment,
    solve_and_record,
)
from .fields import Grid, TimeSeries, VelocityField, inner_product
from .inverse_solver import (
    DEFAULT_MAX_ITER,
    DEFAULT_RADIUS,
    DEFAULT_TOL,
    admissibility,
    apply_A,
    measured_contraction,
    solve_inverse_marching,
    solve_inverse_picard,
)
from .io import FORMAT_VERSION, atomic_write_text, format_float, read_timeseries_csv, write_json
from .manufactured import CASE_PARAMS, DEFAULT_AMPLITUDE, build_case, direct_error, inverse_error, list_cases, verify_closures

log = logging.getLogger("cbf_inverse")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_NOT_CONVERGED = 0, 2, 3, 4
MODES = ("direct", "inverse", "verify", "sweep")
DEFAULT_SEED = 42


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    mode: str
    case: str = "taylor-vortex-r2"
    r: float | None = None
    amplitude: float = DEFAULT_AMPLITUDE
    seed: int = DEFAULT_SEED
    jobs: int = 1
    nx: int = 64
    dt: float = 1e-3
    T: float = 0.25
    mu: float = CASE_PARAMS.mu
    alpha: float = CASE_PARAMS.alpha
    beta: float = CASE_PARAMS.beta
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    radius: float = DEFAULT_RADIUS
    phi_file: str | None = None
    f_file: str | None = None
    trajectory_format: str = "csv"
    slack: float = 0.05
    pairs: int = 200
    stability: bool = True
    eps: tuple = (1e-1, 1e-2, 1e-3, 1e-4)
    T_values: tuple = (0.05, 0.1, 0.2, 0.4, 0.8)
    r_values: tuple = (2.5,)
    out: str = "out"

    def params(self, r: float | None = None) -> PhysicalParams:
        r_use = r if r is not None else (self.r if self.r is not None else 2.0)
        return PhysicalParams(self.mu, self.alpha, self.beta, r_use)

    def solver_config(self, T: float | None = None, r: float | None = None) -> SolverConfig:
        return SolverConfig(Grid(self.nx, self.nx), self.dt, self.T if T is None else T, self.params(r))

    def resolved(self) -> dict:
        d = asdict(self)
        d.pop("out")
        d["eps"] = list(self.eps)
        d["T_values"] = list(self.T_values)
        d["r_values"] = list(self.r_values)
        return d


# (section, key, attribute, parser)
def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


_KEYS = [
    ("run", "mode", "mode", str),
    ("run", "case", "case", str),
    ("run", "r", "r", float),
    ("run", "amplitude", "amplitude", float),
    ("run", "seed", "seed", int),
    ("run", "jobs", "jobs", int),
    ("grid", "nx", "nx", int),
    ("grid", "ny", "_ny", int),
    ("time", "dt", "dt", float),
    ("time", "t", "T", float),
    ("physics", "mu", "mu", float),
    ("physics", "alpha", "alpha", float),
    ("physics", "beta", "beta", float),
    ("inverse", "tol", "tol", float),
    ("inverse", "max_iter", "max_iter", int),
    ("inverse", "radius", "radius", float),
    ("inverse", "phi_file", "phi_file", str),
    ("direct", "f_file", "f_file", str),
    ("direct", "trajectory_format", "trajectory_format", str),
    ("verify", "slack", "slack", float),
    ("verify", "pairs", "pairs", int),
    ("verify", "stability", "stability", "bool"),
    ("verify", "eps", "eps", _floats),
    ("sweep", "t_values", "T_values", _floats),
    ("sweep", "r_values", "r_values", _floats),
]


def _field_error(section: str, key: str, raw: str, exc: Exception, lines: dict) -> ConfigError:
    where = lines.get((section, key))
    loc = f"line {where}: " if where else ""
    return ConfigError(f"{loc}[{section}] {key} = {raw!r}: {exc}")


def _key_lines(text: str) -> dict:
    """Map (section, key) to its 1-based line number for diagnostics."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip().lower()
        elif section and "=" in s and not s.startswith((";", "#")):
            out[(section, s.split("=", 1)[0].strip().lower())] = i
    return out


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse INI text into a validated :class:`RunConfig`.

    Raises :class:`ConfigError` with a line/field diagnostic on any problem.
    """
    if not text.strip():
        raise ConfigError("config file is empty")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    lines = _key_lines(text)
    known = {(s, k) for s, k, _, _ in _KEYS}
    for section in cp.sections():
        if section not in {s for s, _, _, _ in _KEYS}:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if (section, key) not in known:
                where = lines.get((section, key))
                raise ConfigError(f"{'line %d: ' % where if where else ''}unknown key [{section}] {key}")
    values = {}
    for section, key, attr, conv in _KEYS:
        if not cp.has_option(section, key):
            continue
        raw = cp.get(section, key)
        try:
            values[attr] = cp.getboolean(section, key) if conv == "bool" else conv(raw)
        except ValueError as exc:
            raise _field_error(section, key, raw, exc, lines) from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "mode" not in values:
        raise ConfigError("[run] mode is required (one of: " + ", ".join(MODES) + ")")
    ny = values.pop("_ny", None)
    cfg = RunConfig(**values)
    if ny is not None and ny != cfg.nx:
        raise ConfigError(f"[grid] ny = {ny}: manufactured cases need ny == nx = {cfg.nx}")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Check every numeric field against the solver invariants before any compute."""
    if cfg.mode not in MODES:
        raise ConfigError(f"[run] mode = {cfg.mode!r}: expected one of {', '.join(MODES)}")
    if cfg.case not in list_cases():
        raise ConfigError(f"[run] case = {cfg.case!r}: unknown; known cases: {', '.join(list_cases())}")
    if cfg.jobs < 1:
        raise ConfigError(f"[run] jobs = {cfg.jobs}: must be >= 1")
    if not cfg.amplitude > 0:
        raise ConfigError(f"[run] amplitude = {cfg.amplitude}: must be positive")
    if not (cfg.tol > 0 and cfg.max_iter >= 1 and cfg.radius > 0):
        raise ConfigError("[inverse] tol and radius must be positive and max_iter >= 1")
    if cfg.trajectory_format not in ("csv", "bin", "none"):
        raise ConfigError(f"[direct] trajectory_format = {cfg.trajectory_format!r}: expected csv, bin or none")
    if not 0 <= cfg.slack < 1 or cfg.pairs < 1:
        raise ConfigError("[verify] slack must lie in [0, 1) and pairs must be >= 1")
    if not cfg.eps or any(e <= 0 for e in cfg.eps) or any(b >= a for a, b in zip(cfg.eps, cfg.eps[1:])):
        raise ConfigError("[verify] eps must be positive and strictly decreasing")
    if not cfg.T_values or not cfg.r_values:
        raise ConfigError("[sweep] T_values and r_values must be non-empty")
    rs = [cfg.r] if cfg.r is not None else []
    if cfg.mode == "sweep":
        rs += list(cfg.r_values)
    try:
        for r in rs or [2.0]:
            cfg.params(r)
        for T in ([cfg.T] + (list(cfg.T_values) if cfg.mode == "sweep" else [])):
            SolverConfig(Grid(cfg.nx, cfg.nx), cfg.dt, T, cfg.params(rs[0] if rs else None))
    except (DomainError, ValueError) as exc:
        raise ConfigError(f"invalid numeric parameter: {exc}") from None


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------

def _envelope(cfg: RunConfig, payload: dict) -> dict:
    return {"format_version": FORMAT_VERSION, "config": cfg.resolved(), **payload}


def _csv_preamble(cfg: RunConfig) -> list:
    return [f"# format_version: {FORMAT_VERSION}",
            "# config: " + json.dumps(cfg.resolved(), sort_keys=True, separators=(",", ":"))]


def write_series(path, cfg: RunConfig, ts: TimeSeries, name: str) -> Path:
    lines = _csv_preamble(cfg) + [f"t,{name}"]
    lines += [f"{format_float(t)},{format_float(v)}" for t, v in zip(ts.times, ts.samples)]
    return atomic_write_text(path, "\n".join(lines) + "\n")


def write_table(path, cfg: RunConfig, header: list, rows: list) -> Path:
    def cell(v):
        if v is None:
            return "nan"
        if isinstance(v, (bool, np.bool_)):
            return str(bool(v)).lower()
        if isinstance(v, (float, np.floating)):
            return format_float(v)
        return str(v)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([cell(v) for v in row] for row in rows)
    return atomic_write_text(path, "\n".join(_csv_preamble(cfg)) + "\n" + buf.getvalue())


def _read_series(path, like: TimeSeries, what: str) -> TimeSeries:
    try:
        ts = read_timeseries_csv(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from None
    if len(ts) != len(like) or not math.isclose(ts.dt, like.dt, rel_tol=1e-9):
        raise ConfigError(f"{what}: expected {len(like)} samples with dt = {like.dt}, got {len(ts)} with dt = {ts.dt}")
    return ts


def _build(cfg: RunConfig, T: float | None = None, r: float | None = None):
    sc = cfg.solver_config(T=T, r=r)
    return build_case(cfg.case, r=r if r is not None else cfg.r, cfg=sc, amplitude=cfg.amplitude)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_direct(cfg: RunConfig) -> int:
    built = _build(cfg)
    data = built.data
    f = built.f_exact if cfg.f_file is None else _read_series(cfg.f_file, built.f_exact, "[direct] f_file")
    traj = solve_direct(data.u0, f, data.g, data.cfg)
    out = Path(cfg.out)
    if cfg.trajectory_format != "none":
        export_trajectory(traj, out / f"trajectory.{cfg.trajectory_format}", fmt=cfg.trajectory_format)
    measured = TimeSeries(0.0, cfg.dt, [inner_product(u, data.omega) for u in traj.snapshots])
    energy = TimeSeries(0.0, cfg.dt, [math.sqrt(inner_product(u, u)) for u in traj.snapshots])
    write_series(out / "phi.csv", cfg, measured, "phi")
    write_series(out / "f.csv", cfg, f, "f")
    write_series(out / "energy.csv", cfg, energy, "norm_h")
    err = direct_error(traj, built)
    write_json(out / "direct_report.json", _envelope(cfg, {
        "case": built.case.name, "r": built.case.r, "steps": cfg.solver_config().nsteps,
        "error_vs_exact": {k: v for k, v in err.items() if k != "l2_series"},
        "f_source": "file" if cfg.f_file else "exact",
    }))
    return EXIT_OK


def cmd_inverse(cfg: RunConfig) -> int:
    built = _build(cfg)
    data = built.data
    if cfg.phi_file is not None:
        phi = _read_series(cfg.phi_file, data.phi, "[inverse] phi_file")
        data = replace(data, phi=phi)
    out = Path(cfg.out)
    adm = admissibility(data, a=cfg.radius)
    write_json(out / "admissibility_report.json", _envelope(cfg, adm.to_dict()))
    f_rec, rep = solve_inverse_picard(data, tol=cfg.tol, max_iter=cfg.max_iter, a=cfg.radius)
    write_series(out / "f_rec.csv", cfg, f_rec, "f")
    summary = rep.to_dict(include_iterates=False)
    summary["relative_error_vs_exact"] = inverse_error(f_rec, built) if cfg.phi_file is None else None
    write_json(out / "iteration_report.json", _envelope(cfg, summary))
    if not rep.converged:
        log.error("Picard iteration did not converge after %d iterations", rep.iterations)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _random_field(grid: Grid, rng: np.random.Generator, scale: float) -> VelocityField:
    return VelocityField(scale * rng.standard_normal((grid.nx + 1, grid.ny)),
                         scale * rng.standard_normal((grid.nx, grid.ny + 1)), grid)


def _forced(check: EstimateCheck) -> dict:
    """Self-test entry: passes when the halved-bound check fails as designed."""
    d = check.to_dict()
    d["name"] = check.name + "_forced_failure"
    d["expect_failure"] = True
    d["passed"] = not check.passed
    return d


def _bound_entry(name: str, value: float, limit: float, **context) -> dict:
    return EstimateCheck(name, float(value), float(limit), 0.0, context=context).to_dict()


def verify_checks(cfg: RunConfig) -> list:
    """Run the estimate suite on the configured case; return ledger entries."""
    built = _build(cfg)
    data = built.data
    case = built.case
    sc = data.cfg
    p = sc.params
    entries = [_bound_entry("closure_residual", verify_closures(case), 1e-10)]

    traj = solve_direct(data.u0, built.f_exact, data.g, sc)
    f2 = built.f_exact.with_samples(0.9 * built.f_exact.samples)
    traj2 = solve_direct(data.u0, f2, data.g, sc)
    checks = [
        check_energy_sup_bound(traj, built.f_exact, data.g, slack=cfg.slack),
        check_energy_balance(traj, built.f_exact, data.g, slack=cfg.slack),
        check_run_difference(traj, traj2, built.f_exact, f2, data.g, slack=cfg.slack),
        check_run_difference_same_start(traj, traj2, built.f_exact, f2, data.g, slack=cfg.slack),
    ]
    entries += [c.to_dict() for c in checks]

    # harness self-tests: runs where the bounds are tight must fail once halved
    zero_f = built.f_exact.with_samples(np.zeros(len(built.f_exact)))
    free = solve_direct(data.u0, zero_f, data.g, sc)
    rest = solve_direct(VelocityField.zeros(sc.grid), zero_f, data.g, sc)
    entries += [
        _forced(check_energy_sup_bound(free, zero_f, data.g, slack=cfg.slack, rhs_scale=0.5)),
        _forced(check_energy_balance(free, zero_f, data.g, slack=cfg.slack, rhs_scale=0.5)),
        _forced(check_run_difference(free, rest, zero_f, zero_f, data.g, slack=cfg.slack, rhs_scale=0.5)),
    ]

    rng = np.random.default_rng(cfg.seed)
    worst_mono = worst_incr = None
    for _ in range(cfg.pairs):
        scale = 10.0 ** rng.uniform(-2, 1)
        v1, v2 = _random_field(sc.grid, rng, scale), _random_field(sc.grid, rng, scale)
        c1 = check_forchheimer_monotonicity(v1, v2, p.beta, p.r)
        c2 = check_forchheimer_increment(v1, v2, p.r)
        if worst_mono is None or c1.margin < worst_mono.margin:
            worst_mono = c1
        if worst_incr is None or c2.margin < worst_incr.margin:
            worst_incr = c2
    for c in (worst_mono, worst_incr):
        d = c.to_dict()
        d["context"]["pairs"] = cfg.pairs
        entries.append(d)

    f_pic, rep = solve_inverse_picard(data, tol=cfg.tol, max_iter=cfg.max_iter, a=cfg.radius)
    entries.append(_bound_entry("picard_converged", 0.0 if rep.converged else 1.0, 0.0, iterations=rep.iterations))
    af, traj_f = apply_A(f_pic, data, return_trajectory=True)
    fixed = af.with_samples(af.samples - f_pic.samples).l2_norm() / f_pic.l2_norm()
    entries.append(_bound_entry("fixed_point_residual", fixed, 10 * cfg.tol))
    over = max(abs(inner_product(u, data.omega) - ph) for u, ph in zip(traj_f.snapshots, data.phi.samples))
    entries.append(_bound_entry("overdetermination", over, 1e-3))
    f_march = solve_inverse_marching(data)
    agree = f_pic.with_samples(f_pic.samples - f_march.samples).l2_norm() / f_march.l2_norm()
    entries.append(_bound_entry("picard_vs_marching", agree, 1e-6))
    entries.append(_bound_entry("recovery_error", inverse_error(f_pic, built), 1e-2))

    if cfg.stability:
        base = solve_and_record(data)
        for kind in ("u0", "g", "phi"):
            exp = run_stability_experiment(data, kind, cfg.eps, jobs=cfg.jobs, base_solution=base)
            for q, s in exp.slopes.items():
                dev = abs(s - 1.0) if math.isfinite(s) else math.inf
                entries.append(_bound_entry(f"stability_{kind}_{q}", dev, 0.15, slope=s,
                                            lipschitz=exp.lipschitz[q], partial=exp.partial))
    return entries


def cmd_verify(cfg: RunConfig) -> int:
    entries = verify_checks(cfg)
    ok = all(e["passed"] for e in entries)
    write_json(Path(cfg.out) / "check_ledger.json", _envelope(cfg, {"all_passed": ok, "checks": entries}))
    for e in entries:
        log.info("%-32s %s", e["name"], "pass" if e["passed"] else "FAIL")
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


SWEEP_HEADER = ["r", "T", "regime", "m1", "m2", "m4", "m6", "contraction_factor", "k_power",
                "measured_contraction", "picard_converged", "picard_iterations", "recovery_error"]


def sweep_member(args) -> list:
    """One (r, T) point of the sweep; runs in a worker process."""
    cfg, r, T = args
    built = _build(cfg, T=T, r=r)
    data = built.data
    adm = admissibility(data, a=cfg.radius)
    kappa = measured_contraction(data, a=cfg.radius)
    f_rec, rep = solve_inverse_picard(data, tol=cfg.tol, max_iter=cfg.max_iter, a=cfg.radius)
    return [r, T, adm.regime, adm.m1, adm.m2, adm.m4, adm.m6, adm.contraction_factor,
            adm.k_power if adm.k_power is not None else "nan", kappa, rep.converged, rep.iterations,
            inverse_error(f_rec, built)]


def run_sweep(cfg: RunConfig) -> list:
    members = [(cfg, float(r), float(T)) for r in cfg.r_values for T in cfg.T_values]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            return list(ex.map(sweep_member, members))
    return [sweep_member(m) for m in members]


def cmd_sweep(cfg: RunConfig) -> int:
    rows = run_sweep(cfg)
    write_table(Path(cfg.out) / "sweep.csv", cfg, SWEEP_HEADER, rows)
    return EXIT_OK


COMMANDS = {"direct": cmd_direct, "inverse": cmd_inverse, "verify": cmd_verify, "sweep": cmd_sweep}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _setup_logging() -> None:
    level = os.environ.get("CBF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cbf-inverse", description=__doc__.split("\n")[0])
    ap.add_argument("--config", help="INI run configuration")
    ap.add_argument("--mode", choices=MODES, help="override [run] mode")
    ap.add_argument("--out", default=None, help="output directory (default: out)")
    ap.add_argument("--jobs", type=int, default=None, help="worker processes for sweeps and stability runs")
    ap.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
    ap.add_argument("--list-cases", action="store_true", help="print the manufactured-case catalog and exit")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.list_cases:
        print("\n".join(list_cases()))
        return EXIT_OK
    if not args.config:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    overrides = {"mode": args.mode, "out": args.out, "jobs": args.jobs, "seed": args.seed}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[cfg.mode](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CatalogError, AdmissibilityError, DomainError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CBFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
