"""Command-line front end: ``kolmogorov <command> --config run.toml --out dir``.

Every command writes its CSV artifacts and one ``report.json`` into the
output directory.  Exit status is 0 on success, 2 when a diagnostic verdict
is "not established" and 1 on configuration or computational failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from importlib import resources

import numpy as np

from . import __version__
from .coeffexpr import ExprError
from .fields import (Ball, ConstantField, Field, FieldError, Grid, matrix_field, read_csv, sample,
                     scalar_field, vector_field, write_atomic, write_csv)

try:
    import tomllib
except ModuleNotFoundError:   # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("kolmogorov")

EXIT_OK, EXIT_FAIL, EXIT_UNWITNESSED = 0, 1, 2


class ConfigError(ValueError):
    pass


# --- configuration --------------------------------------------------------

def _get(cfg: dict, path: str, default=..., kind=None):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if default is ...:
                raise ConfigError(f"{path}: missing required entry")
            return default
        node = node[part]
    if kind is not None and not isinstance(node, kind):
        names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(f"{path}: expected {names}, got {type(node).__name__}")
    return node


def _floats(cfg: dict, path: str, length: int | None = None, default=...) -> list:
    value = _get(cfg, path, default)
    if value is None:
        return None
    if isinstance(value, (int, float)):
        value = [value]
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
        raise ConfigError(f"{path}: expected a list of numbers")
    if length is not None and len(value) != length:
        raise ConfigError(f"{path}: expected {length} entries, got {len(value)}")
    return [float(v) for v in value]


class RunConfig:
    """Validated view of a TOML run configuration."""

    def __init__(self, raw: dict):
        self.raw = raw
        d = _get(raw, "problem.dim", kind=int)
        if d not in (1, 2, 3):
            raise ConfigError(f"problem.dim: must be 1, 2 or 3, got {d}")
        self.dim = d
        lo = _floats(raw, "problem.lo", d)
        hi = _floats(raw, "problem.hi", d)
        n = _get(raw, "problem.n")
        n = [n] * d if isinstance(n, int) else n
        if not isinstance(n, list) or len(n) != d or not all(isinstance(v, int) for v in n):
            raise ConfigError(f"problem.n: expected {d} integers")
        try:
            self.grid = Grid(tuple(lo), tuple(hi), tuple(n))
        except (FieldError, ValueError) as exc:
            raise ConfigError(f"problem: {exc}") from exc
        self.A = self._matrix("coefficients.a")
        self.b = self._vector("coefficients.b")
        self.c = self._scalar("coefficients.c")

    def _entries(self, path: str, value):
        if isinstance(value, (str, int, float)):
            return value
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected an expression or list of expressions")
        return value

    def _wrap(self, path: str, builder, value):
        try:
            return builder(value, self.dim)
        except (ExprError, FieldError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def _matrix(self, path: str) -> Field:
        value = self._entries(path, _get(self.raw, path, "1" if self.dim == 1 else None))
        d = self.dim
        if value is None:
            return ConstantField(np.eye(d), d)
        if not isinstance(value, list):
            value = [value]
        flat = [v for row in value for v in (row if isinstance(row, list) else [row])]
        if len(flat) != d * d:
            raise ConfigError(f"{path}: expected {d * d} entries, got {len(flat)}")
        rows = [flat[i * d:(i + 1) * d] for i in range(d)]
        return self._wrap(path, matrix_field, rows)

    def _vector(self, path: str) -> Field:
        value = self._entries(path, _get(self.raw, path, None))
        d = self.dim
        if value is None:
            return ConstantField(np.zeros(d), d)
        if not isinstance(value, list):
            value = [value]
        if len(value) != d:
            raise ConfigError(f"{path}: expected {d} entries, got {len(value)}")
        return self._wrap(path, vector_field, value)

    def _scalar(self, path: str) -> Field | None:
        value = _get(self.raw, path, None)
        if value is None:
            return None
        if not isinstance(value, (str, int, float)):
            raise ConfigError(f"{path}: expected a single expression")
        return self._wrap(path, scalar_field, value)

    def section(self, name: str) -> dict:
        sec = self.raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{name}: expected a table")
        return sec

    def ball(self) -> Ball:
        z = self.section("zvonkin")
        center = _floats(self.raw, "zvonkin.ball_center", self.dim, [0.0] * self.dim)
        if "support_radius" in z:
            return Ball.with_support(center, float(_get(self.raw, "zvonkin.support_radius", kind=(int, float))))
        radius = float(_get(self.raw, "zvonkin.ball_radius", kind=(int, float)))
        return Ball(center, radius)

    def solver(self) -> dict:
        return {
            "bc": _get(self.raw, "solver.bc", "noflux", str),
            "tol": float(_get(self.raw, "solver.tol", 1e-10, (int, float))),
            "method": _get(self.raw, "solver.method", "auto", str),
            "drift": _get(self.raw, "solver.drift", "fitted", str),
        }


BUNDLED = ("ou1d", "ou2d", "zvonkin2d", "doublewell", "rough2d")


def load_config(path: str) -> RunConfig:
    if path.startswith("bundled:"):
        name = path.split(":", 1)[1]
        if name not in BUNDLED:
            raise ConfigError(f"unknown bundled config {name!r}; choose from {', '.join(BUNDLED)}")
        text = resources.files("kolmogorov").joinpath("configs", f"{name}.toml").read_text()
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    return RunConfig(raw)


# --- helpers --------------------------------------------------------------

def _versions() -> dict:
    import numba
    import scipy
    return {"kolmogorov": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_report(out: str, command: str, cfg: RunConfig | None, body: dict, seed=None) -> None:
    report = {"command": command, "versions": _versions(), "seed": seed,
              "inputs": cfg.raw if cfg is not None else None}
    report.update(body)
    write_atomic(os.path.join(out, "report.json"), json.dumps(_jsonable(report), indent=2, sort_keys=True))


def _verdict_status(verdict: str) -> int:
    return EXIT_OK if verdict == "witnessed" else EXIT_UNWITNESSED


def _density_problem(cfg: RunConfig):
    from .fpsolver import StationaryProblem
    s = cfg.solver()
    return StationaryProblem(cfg.grid, cfg.A, cfg.b, cfg.c, s["bc"], s["drift"])


# --- commands -------------------------------------------------------------

def cmd_solve(args, cfg: RunConfig) -> int:
    from .fpsolver import residual_budget, solve_stationary, solve_via_zvonkin, weak_residual
    s = cfg.solver()
    if args.via_zvonkin:
        z = cfg.section("zvonkin")
        sol = solve_via_zvonkin(cfg.A, cfg.b, cfg.grid, cfg.ball(), float(z.get("delta", 0.2)), s["tol"],
                                float(z.get("lambda0", 1.0)), s["drift"])
        sigma = sol.extra.pop("sigma")
        write_csv(os.path.join(args.out, "sigma.csv"), cfg.grid, sigma)
        budget = None
        wr = sol.extra["weak_residual_original"]
    else:
        prob = _density_problem(cfg)
        sol = solve_stationary(prob, s["tol"], s["method"])
        wr = weak_residual(sol, prob)
        budget = residual_budget(prob, s["tol"])
    sol.write_csv(os.path.join(args.out, "density.csv"))
    body = {"solve": sol.report(), "weak_residual": wr, "weak_residual_budget": budget}
    _write_report(args.out, "solve", cfg, body)
    if budget is not None and wr > budget:
        return EXIT_UNWITNESSED
    return EXIT_OK


def _build_map(cfg: RunConfig):
    from .zvonkin import build_zvonkin
    z = cfg.section("zvonkin")
    s = cfg.solver()
    return build_zvonkin(cfg.A, cfg.b, cfg.ball(), cfg.grid, float(z.get("delta", 0.2)),
                         float(z.get("lambda0", 1.0)), tol=s["tol"], drift=s["drift"])


def cmd_zvonkin_map(args, cfg: RunConfig) -> int:
    zmap = _build_map(cfg)
    write_csv(os.path.join(args.out, "u.csv"), cfg.grid, zmap.u)
    _write_report(args.out, "zvonkin-map", cfg, {"zvonkin": zmap.report()})
    return EXIT_OK


def cmd_transform(args, cfg: RunConfig) -> int:
    from .transform import pushforward_coefficients
    zmap = _build_map(cfg)
    tp = pushforward_coefficients(zmap, cfg.A, c=cfg.c, grid=cfg.grid, ball=cfg.ball())
    write_csv(os.path.join(args.out, "Q.csv"), cfg.grid, tp.Q.values)
    write_csv(os.path.join(args.out, "h.csv"), cfg.grid, tp.h.values)
    body = {"zvonkin": zmap.report(), "Q_eigen_bounds": list(tp.bounds),
            "target_ball": {"center": tp.center, "radius": tp.radius}}
    _write_report(args.out, "transform", cfg, body)
    return EXIT_OK


def cmd_lift(args, cfg: RunConfig) -> int:
    from .fields import ellipticity_bounds
    from .transform import lift_kill_drift, lift_potential
    sec = cfg.section("lift")
    if args.kill_drift:
        M = float(_get(cfg.raw, "lift.M", kind=(int, float)))
        lift = lift_kill_drift(cfg.A, cfg.b, M, cfg.grid, sec.get("y_nodes"))
        _write_report(args.out, "lift", cfg, {"mode": "kill-drift", "lift": lift.report()})
        return EXIT_OK if lift.positive_definite else EXIT_UNWITNESSED
    if cfg.c is None:
        raise ConfigError("coefficients.c: required for --potential")
    A_plus, b_plus = lift_potential(cfg.A, cfg.b, cfg.c)
    d = cfg.dim
    if d + 1 > 3:
        raise ConfigError("problem.dim: potential lift needs dim <= 2")
    y_hi = float(sec.get("y_max", 1.0))
    g = cfg.grid
    lifted = Grid(g.lo + (0.0,), g.hi + (y_hi,), g.shape + (int(sec.get("y_nodes", 11)),))
    lo, hi = ellipticity_bounds(A_plus, lifted)
    bp = sample(b_plus, lifted)
    body = {"mode": "potential", "dim": d + 1, "ellipticity": [lo, hi],
            "drift_sup": float(np.max(np.linalg.norm(bp, axis=-1)))}
    _write_report(args.out, "lift", cfg, body)
    return EXIT_OK


def _pick_field(cfg: RunConfig, name: str) -> Field:
    if name == "a":
        return cfg.A
    if name == "b":
        return cfg.b
    if name == "c":
        if cfg.c is None:
            raise ConfigError("coefficients.c: not set but requested by moduli.field")
        return cfg.c
    try:
        return scalar_field(name, cfg.dim)
    except (ExprError, FieldError) as exc:
        raise ConfigError(f"moduli.field: {exc}") from exc


def cmd_moduli(args, cfg: RunConfig) -> int:
    from .moduli import ModulusError, dini_mean_oscillation, uniform_modulus, vmo_modulus
    sec = cfg.section("moduli")
    f = _pick_field(cfg, str(sec.get("field", "a")))
    h = float(cfg.grid.h.max())
    radii = _floats(cfg.raw, "moduli.radii", None, [h * 2**k for k in range(6)])
    centers = int(sec.get("centers", 9))
    t = _floats(cfg.raw, "moduli.t", None, [])
    uni = uniform_modulus(f, cfg.grid, radii)
    body = {"uniform": None, "dmo": None, "vmo": None}
    try:
        body["uniform"] = uni.report(t=t)
    except ModulusError as exc:
        body["uniform"] = uni.report()
        body["uniform"]["lambda_error"] = str(exc)
    body["dmo"] = dini_mean_oscillation(f, cfg.grid, radii, centers).report()
    if f.value_shape == (cfg.dim, cfg.dim):
        seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
        body["vmo"] = vmo_modulus(f, cfg.grid, radii, centers, int(sec.get("pairs", 4000)), seed).report()
    _write_report(args.out, "moduli", cfg, body, seed=args.seed)
    return EXIT_OK


def _solve_density(cfg: RunConfig):
    from .fpsolver import solve_stationary
    return solve_stationary(_density_problem(cfg), cfg.solver()["tol"], cfg.solver()["method"])


def cmd_diagnose(args, cfg: RunConfig) -> int:
    from . import diagnostics as dg
    sec = cfg.section("diagnostics")
    d = cfg.dim
    center = _floats(cfg.raw, "diagnostics.center", d, [0.0] * d)
    radius = float(sec.get("radius", 1.0))
    radii = _floats(cfg.raw, "diagnostics.radii", None, [1.0, 2.0, 3.0, 4.0])
    V = sec.get("V")
    Vf = None
    if V is not None:
        try:
            Vf = scalar_field(str(V), d)
        except (ExprError, FieldError) as exc:
            raise ConfigError(f"diagnostics.V: {exc}") from exc
    which = args.which
    if which == "harnack":
        rep = dg.harnack_ratio(_solve_density(cfg), center, radius / 2)
        body, status = rep.report(), EXIT_OK
    elif which == "lq":
        q = _floats(cfg.raw, "diagnostics.q_ladder", None, None)
        rep = dg.lq_growth(_solve_density(cfg), center, radius, q)
        body, status = rep.report(), _verdict_status(rep.verdict)
    elif which == "lyapunov":
        if Vf is None:
            raise ConfigError("diagnostics.V: required for lyapunov")
        rep = dg.lyapunov_check(cfg.A, cfg.b, Vf, radii, int(sec.get("samples_per_sphere", 64)), d)
        body, status = rep.report(), _verdict_status(rep.verdict)
    elif which == "dissipativity":
        rep = dg.dissipativity_check(cfg.b, radii, int(sec.get("samples_per_sphere", 64)), d)
        body, status = rep.report(), _verdict_status(rep.verdict)
    elif which == "uniqueness":
        rep = dg.uniqueness_conditions(cfg.A, cfg.b, _solve_density(cfg), V=Vf, radii=radii)
        body, status = rep.report(), _verdict_status(rep.verdict)
    elif which == "mollify-ladder":
        ks = [int(k) for k in sec.get("k_ladder", [2, 4, 8, 16])]
        rep = dg.mollification_stability(cfg.A, cfg.b, cfg.grid, ks, center, radius, cfg.solver()["tol"])
        for k, rho in zip(ks, rep.densities):
            write_csv(os.path.join(args.out, f"density_k{k}.csv"), cfg.grid, rho)
        body, status = rep.report(), _verdict_status(rep.verdict)
    else:   # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown diagnostic {which!r}")
    _write_report(args.out, f"diagnose {which}", cfg, {"diagnostic": body})
    return status


def cmd_simulate(args, cfg: RunConfig) -> int:
    from .sde import SDEConfig, euler_maruyama
    sec = cfg.section("sde")
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    conf = SDEConfig(cfg.A, cfg.b, cfg.grid, float(sec.get("dt", 1e-3)), float(sec.get("T", 100.0)),
                     float(sec.get("burn_in", 10.0)), int(sec.get("trajectories", 1)), seed)
    occ = euler_maruyama(conf)
    occ.write_csv(os.path.join(args.out, "histogram.csv"))
    reference = None
    if sec.get("reference", "pde") == "pde":
        reference = _solve_density(cfg).rho
    _write_report(args.out, "simulate", cfg, {"sde": occ.report(reference)}, seed=seed)
    return EXIT_OK


def cmd_compare(args, cfg) -> int:
    from .sde import compare_densities
    ga, va = read_csv(args.files[0])
    gb, vb = read_csv(args.files[1])
    if ga != gb:
        raise ConfigError("compare: files are sampled on different grids")
    l1, sup = compare_densities(va, vb, ga)
    _write_report(args.out, "compare", None, {"files": list(args.files), "l1": l1, "sup": sup})
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve, "zvonkin-map": cmd_zvonkin_map, "transform": cmd_transform, "lift": cmd_lift,
    "moduli": cmd_moduli, "diagnose": cmd_diagnose, "simulate": cmd_simulate, "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration, or bundled:<name>")
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--threads", type=int, default=None, help="worker threads for compiled kernels")
    common.add_argument("--seed", type=int, default=None, help="RNG seed, overrides the config")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="kolmogorov", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="stationary density")
    s.add_argument("--via-zvonkin", action="store_true", help="solve through the change of variables")
    sub.add_parser("zvonkin-map", parents=[common], help="build the map Phi = id + u")
    sub.add_parser("transform", parents=[common], help="pushed-forward coefficients")
    s = sub.add_parser("lift", parents=[common], help="dimension lifts")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--potential", action="store_true")
    g.add_argument("--kill-drift", action="store_true")
    sub.add_parser("moduli", parents=[common], help="regularity moduli of a coefficient")
    s = sub.add_parser("diagnose", parents=[common], help="diagnostic checks")
    s.add_argument("which", choices=["harnack", "lq", "lyapunov", "dissipativity", "uniqueness",
                                     "mollify-ladder"])
    sub.add_parser("simulate", parents=[common], help="Euler-Maruyama occupation density")
    s = sub.add_parser("compare", parents=[common], help="L1 and sup distance of two density CSVs")
    s.add_argument("files", nargs=2)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            import numba
            numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
        os.makedirs(args.out, exist_ok=True)
        cfg = None
        if args.command != "compare":
            if not args.config:
                raise ConfigError("--config is required for this command")
            cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Exception as exc:   # computational failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_FAIL
