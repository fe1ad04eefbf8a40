"""Numerical witnesses for qualitative properties of stationary densities.

Every check returns a report with a ``verdict`` of either ``"witnessed"`` or
``"not established"``: sampled data can support a hypothesis or an
estimate, never prove or refute it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linprog, nnls
from scipy.special import logsumexp

from .fields import Field, Grid, mollify, sample
from .fpsolver import StationaryProblem, solve_stationary
from .moduli import ModulusCurve, lambda_function, uniform_modulus

WITNESSED = "witnessed"
NOT_ESTABLISHED = "not established"


class DiagnosticError(ValueError):
    pass


def _density(rho, grid: Grid | None):
    if hasattr(rho, "rho") and hasattr(rho, "grid"):
        return rho.grid, np.asarray(rho.rho, float)
    if hasattr(rho, "values") and hasattr(rho, "grid"):
        return rho.grid, np.asarray(rho.values, float)
    if grid is None:
        raise DiagnosticError("a grid is required for raw density arrays")
    return grid, np.asarray(rho, float).reshape(grid.shape)


def _ball_mask(grid: Grid, center, radius: float) -> np.ndarray:
    c = np.atleast_1d(np.asarray(center, float))
    if np.any(c - radius < np.array(grid.lo) - 1e-12) or np.any(c + radius > np.array(grid.hi) + 1e-12):
        raise DiagnosticError(f"ball B({c.tolist()}, {radius:g}) exits the grid box")
    return grid.distance_from(c) <= radius * (1 + 1e-12)


# --- Harnack ratio --------------------------------------------------------

@dataclass
class HarnackReport:
    center: tuple
    radius: float
    sup: float
    inf: float
    ratio: float
    nodes: int
    grid: dict = field(default_factory=dict)

    def report(self) -> dict:
        return asdict(self)


def harnack_ratio(rho, center, radius: float, grid: Grid | None = None) -> HarnackReport:
    """sup / inf of the density over grid nodes within ``radius`` of ``center``.

    ``radius`` is the radius of the evaluation ball itself (R/2 for a
    Harnack ball B(x0, R)).
    """
    grid, r = _density(rho, grid)
    mask = _ball_mask(grid, center, radius)
    vals = r[mask]
    lo, hi = float(vals.min()), float(vals.max())
    if not lo > 0:
        raise DiagnosticError("density vanishes inside the Harnack ball")
    return HarnackReport(tuple(np.atleast_1d(center).tolist()), float(radius), hi, lo, hi / lo,
                         int(mask.sum()), {"lo": list(grid.lo), "hi": list(grid.hi), "n": list(grid.shape)})


# --- L^q growth -----------------------------------------------------------

def lq_norms(values: np.ndarray, cell: float, q) -> np.ndarray:
    """ln ||f||_q with ||f||_q = M (sum (f/M)^q cell)^{1/q}, M = max f."""
    values = np.asarray(values, float)
    if np.any(values < 0):
        raise DiagnosticError("L^q norms need a nonnegative density")
    M = float(values.max())
    if M == 0:
        return np.full(len(np.atleast_1d(q)), -np.inf)
    scaled = values / M
    out = []
    for qq in np.atleast_1d(q):
        s = float(np.sum(scaled**qq) * cell)
        out.append(math.log(M) + math.log(s) / qq)
    return np.array(out)


@dataclass
class LqGrowthReport:
    q: list
    log_norms: list
    lambda_cq: list
    c: float
    delta: float
    slack: float
    verdict: str
    margins: list
    note: str = ("fitted constants are not constructive; a failed fit on a coarse grid "
                 "does not distinguish a violated bound from a poor fit")

    def report(self) -> dict:
        return asdict(self)


def lq_growth(rho, center, radius: float, q_ladder=None, omega: ModulusCurve | None = None,
              grid: Grid | None = None, c_grid=None, slack: float = 0.05) -> LqGrowthReport:
    """Fit ln||rho||_{L^q(B)} <= c + c Lambda(c q) + delta ln q over a q ladder.

    For each trial c (>= 1/2, so c q >= 1) the smallest delta >= 0 is taken;
    the first c giving delta <= 1 is kept.  The verdict checks the fitted
    bound at every rung with relative slack ``slack``.  ``omega`` defaults to
    omega(s) = s.
    """
    grid, r = _density(rho, grid)
    mask = _ball_mask(grid, center, radius)
    q = np.asarray(q_ladder if q_ladder is not None else 2.0 ** np.arange(1, 13), float)
    if np.any(q < 1):
        raise DiagnosticError("q ladder must satisfy q >= 1")
    logn = lq_norms(r[mask], grid.cell_volume, q)
    if omega is None:
        radii = np.logspace(-8, 0, 33)
        omega = ModulusCurve(radii, radii, "uniform")
    c_grid = np.asarray(c_grid if c_grid is not None else np.concatenate([np.arange(0.5, 10.0, 0.25),
                                                                           np.arange(10, 101, 5.0)]))
    best = None
    for c in c_grid:
        lam = lambda_function(omega, np.maximum(c * q, 1.0)).values
        base = c + c * lam
        lnq = np.log(q)
        need = np.where(lnq > 0, (logn - base) / np.where(lnq > 0, lnq, 1.0), np.where(logn > base, np.inf, 0.0))
        delta = max(0.0, float(np.max(need)))
        if delta <= 1.0:
            best = (float(c), delta, lam)
            break
    if best is None:
        c = float(c_grid[-1])
        lam = lambda_function(omega, np.maximum(c * q, 1.0)).values
        best = (c, 1.0, lam)
    c, delta, lam = best
    rhs = c + c * lam + delta * np.log(q)
    margins = rhs + slack * np.abs(rhs) - logn
    verdict = WITNESSED if np.all(margins >= 0) and delta <= 1.0 and np.all(np.isfinite(logn)) else NOT_ESTABLISHED
    return LqGrowthReport(q.tolist(), logn.tolist(), lam.tolist(), c, delta, slack, verdict, margins.tolist())


# --- exponential integrability --------------------------------------------

@dataclass
class ExpIntegrabilityReport:
    log_value: float
    value: float
    finite: bool
    kind: str

    def report(self) -> dict:
        return asdict(self)


def exp_integrability_probe(rho, center, radius: float, gamma1: float, gamma2: float = 1.0,
                            kind: str = "power", beta: float | None = None,
                            grid: Grid | None = None) -> ExpIntegrabilityReport:
    """Trapezoid value of int_B exp(F(rho)) over the ball, in log-sum-exp form.

    ``kind="power"``: F = gamma1 rho^gamma2.
    ``kind="log"``:   F = gamma1 |ln(rho + 1)|^{1/(1-beta)}.
    """
    if gamma1 <= 0 or gamma2 <= 0:
        raise DiagnosticError("gamma parameters must be positive")
    grid, r = _density(rho, grid)
    mask = _ball_mask(grid, center, radius)
    w = grid.trapezoid_weights()[mask]
    v = np.abs(r[mask])
    if kind == "power":
        expo = gamma1 * v**gamma2
    elif kind == "log":
        if beta is None or not 0 <= beta < 1:
            raise DiagnosticError("log probe needs beta in [0, 1)")
        expo = gamma1 * np.abs(np.log1p(v)) ** (1.0 / (1.0 - beta))
    else:
        raise DiagnosticError(f"unknown probe kind {kind!r}")
    with np.errstate(over="ignore"):
        logv = float(logsumexp(expo + np.log(w)))
    if not math.isfinite(logv):
        return ExpIntegrabilityReport(logv, math.inf, False, kind)
    # a finite log value is a finite integral even when exp(logv) overflows a double
    value = math.exp(logv) if logv < 709.0 else math.inf
    return ExpIntegrabilityReport(logv, value, True, kind)


# --- sphere sampling ------------------------------------------------------

def sphere_points(dim: int, radius: float, count: int = 64, center=None) -> np.ndarray:
    """Deterministic near-uniform points on the sphere |x - center| = radius."""
    if dim == 1:
        pts = np.array([[-1.0], [1.0]])
    elif dim == 2:
        t = 2 * np.pi * np.arange(count) / count
        pts = np.stack([np.cos(t), np.sin(t)], axis=1)
    elif dim == 3:
        k = np.arange(count) + 0.5
        z = 1 - 2 * k / count
        phi = np.pi * (1 + 5**0.5) * k
        s = np.sqrt(1 - z**2)
        pts = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
    else:
        raise DiagnosticError("dimension must be 1, 2 or 3")
    c = np.zeros(dim) if center is None else np.asarray(center, float)
    return c + radius * pts


# --- Lyapunov functions ---------------------------------------------------

FD_STEP = 1e-2


def _directional_derivatives(V, x: np.ndarray, dirs: np.ndarray, step: np.ndarray) -> tuple:
    """First and second derivatives of V along unit ``dirs`` (4th-order central)."""
    s = step[..., None]
    f = {k: np.asarray(V(x + k * s * dirs), float) for k in (-2, -1, 1, 2)}
    f0 = np.asarray(V(x), float)
    d1 = (-f[2] + 8 * f[1] - 8 * f[-1] + f[-2]) / (12 * step)
    d2 = (-f[2] + 16 * f[1] - 30 * f0 + 16 * f[-1] - f[-2]) / (12 * step**2)
    return d1, d2


def generator_values(A: Field, b: Field, V, x: np.ndarray, grad=None, hess=None) -> np.ndarray:
    """LV = tr(A D^2 V) + <b, grad V> at points x (..., d).

    With ``grad`` and ``hess`` callables the exact derivatives are used;
    otherwise second derivatives along the eigenvectors of A and the first
    derivative along b come from 4th-order central differences with step
    0.01 max(1, |x|).
    """
    x = np.asarray(x, float)
    a = np.asarray(A(x), float)
    bv = np.asarray(b(x), float)
    if grad is not None and hess is not None:
        return np.einsum("...ij,...ij->...", a, hess(x)) + np.einsum("...i,...i->...", bv, grad(x))
    step = FD_STEP * np.maximum(1.0, np.linalg.norm(x, axis=-1))
    lam, vec = np.linalg.eigh(a)
    out = np.zeros(x.shape[:-1])
    for k in range(x.shape[-1]):
        _, d2 = _directional_derivatives(V, x, vec[..., :, k], step)
        out += lam[..., k] * d2
    nb = np.linalg.norm(bv, axis=-1)
    unit = np.where(nb[..., None] > 0, bv / np.where(nb > 0, nb, 1.0)[..., None], 0.0)
    d1, _ = _directional_derivatives(V, x, unit, step)
    return out + nb * d1


@dataclass
class LyapunovReport:
    radii: list
    max_LV: list
    C: list                   # C(R) = -max_{r >= R} max_sphere LV
    working_radius: float | None
    C_at_working: float | None
    V_increasing: bool
    C1: float | None
    C2: float | None
    linear_growth: str
    verdict: str

    def report(self) -> dict:
        return asdict(self)


def lyapunov_check(A: Field, b: Field, V, radii, samples_per_sphere: int = 64, dim: int | None = None,
                   grad=None, hess=None, center=None) -> LyapunovReport:
    """Sample LV on spheres: Hasminskii constants C(R) and a (C1, C2) fit of LV <= C1 + C2 V."""
    radii = np.asarray(radii, float)
    if np.any(np.diff(radii) <= 0):
        raise DiagnosticError("radii must be strictly increasing")
    d = dim or A.dim
    maxlv, minv, allx = [], [], []
    for r in radii:
        x = sphere_points(d, r, samples_per_sphere, center)
        lv = generator_values(A, b, V, x, grad, hess)
        if not np.all(np.isfinite(lv)):
            raise DiagnosticError(f"LV not finite on the sphere of radius {r:g}")
        maxlv.append(float(lv.max()))
        minv.append(float(np.min(V(x))))
        allx.append(x)
    maxlv = np.array(maxlv)
    C = -np.maximum.accumulate(maxlv[::-1])[::-1]
    ok = np.nonzero(C > 0)[0]
    working = float(radii[ok[0]]) if len(ok) else None
    c_work = float(C[ok[0]]) if len(ok) else None
    v_inc = bool(np.all(np.diff(minv) > 0))

    # (C1, C2) >= 0 minimising C1 + C2 with LV <= C1 + C2 V at every sample
    pts = np.concatenate(allx)
    lv = generator_values(A, b, V, pts, grad, hess)
    vv = np.asarray(V(pts), float)
    res = linprog(c=[1.0, 1.0], A_ub=np.stack([-np.ones_like(vv), -vv], axis=1), b_ub=-lv,
                  bounds=[(0, None), (0, None)], method="highs")
    C1 = C2 = None
    linear = NOT_ESTABLISHED
    if res.status == 0:
        C1, C2 = (float(v) for v in res.x)
        linear = WITNESSED
    verdict = WITNESSED if working is not None and v_inc else NOT_ESTABLISHED
    return LyapunovReport(radii.tolist(), maxlv.tolist(), C.tolist(), working, c_work, v_inc,
                          C1, C2, linear, verdict)


# --- dissipativity --------------------------------------------------------

@dataclass
class DissipativityReport:
    radii: list
    max_inner: list
    verdict: str

    def report(self) -> dict:
        return asdict(self)


def dissipativity_check(b: Field, radii, samples_per_sphere: int = 64, dim: int | None = None) -> DissipativityReport:
    """Per-radius max of <b(x), x>; witnessed when decreasing and negative at the two largest radii."""
    radii = np.asarray(radii, float)
    if len(radii) < 2 or np.any(np.diff(radii) <= 0):
        raise DiagnosticError("need at least two increasing radii")
    d = dim or b.dim
    m = []
    for r in radii:
        x = sphere_points(d, r, samples_per_sphere)
        m.append(float(np.max(np.einsum("...i,...i->...", np.asarray(b(x), float), x))))
    verdict = WITNESSED if m[-1] < m[-2] < 0 else NOT_ESTABLISHED
    return DissipativityReport(radii.tolist(), m, verdict)


# --- split drift ----------------------------------------------------------

@dataclass
class SplitDriftReport:
    C1: float
    C2: float
    C3: float
    lp_norm: float
    tail_exponent: float | None
    verdict: str
    conditions: dict

    def report(self) -> dict:
        return asdict(self)


def _unit_sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def split_drift_check(b1: Field, b2: Field, kappa: float, p: float, grid: Grid, radii=None,
                      samples_per_sphere: int = 64) -> SplitDriftReport:
    """Witness <b1, x> <= C1 - C2 |x|^{k+1}, |b1| <= C3 (1 + |x|^k) and b2 in L^p.

    C1, C2 come from a nonnegative least-squares fit of the sphere maxima,
    with C1 raised until the bound holds at every sample.  The L^p norm of b2
    is the grid quadrature inside the largest inscribed ball plus a
    power-law tail |b2|^p ~ r^{-s}, which is finite only when s > d.
    """
    d = grid.dim
    if kappa <= 0 or p <= d:
        raise DiagnosticError("need kappa > 0 and p > d")
    half = 0.5 * float(np.min(np.array(grid.hi) - np.array(grid.lo)))
    center = 0.5 * (np.array(grid.lo) + np.array(grid.hi))
    radii = np.asarray(radii if radii is not None else np.linspace(0.1, 1.0, 10) * half, float)
    inner, norms = [], []
    for r in radii:
        x = sphere_points(d, r, samples_per_sphere)
        bx = np.asarray(b1(x), float)
        inner.append(float(np.max(np.einsum("...i,...i->...", bx, x))))
        norms.append(float(np.max(np.linalg.norm(bx, axis=-1))))
    inner, norms = np.array(inner), np.array(norms)
    # inner <= C1 - C2 r^{k+1}: fit  -inner ~ C2 r^{k+1} - C1  with C1 free in sign
    A = np.stack([radii ** (kappa + 1), np.ones_like(radii), -np.ones_like(radii)], axis=1)
    coef, _ = nnls(A, -inner)
    C2 = float(coef[0])
    C1 = float(max(0.0, np.max(inner + C2 * radii ** (kappa + 1))))
    C3 = float(np.max(norms / (1 + radii**kappa)))

    # L^p norm of b2
    dist = grid.distance_from(center)
    vals = np.linalg.norm(np.asarray(sample(b2, grid), float).reshape(grid.shape + (d,)), axis=-1) ** p
    w = grid.trapezoid_weights()
    inside = dist <= half
    core = float(np.sum(np.where(inside, w * vals, 0.0)))
    edges = np.linspace(0.5 * half, half, 9)
    shell_r, shell_v = [], []
    for lo_r, hi_r in zip(edges[:-1], edges[1:]):
        sel = (dist > lo_r) & (dist <= hi_r)
        if sel.any():
            shell_r.append(0.5 * (lo_r + hi_r))
            shell_v.append(float(vals[sel].mean()))
    shell_r, shell_v = np.array(shell_r), np.array(shell_v)
    if np.all(shell_v == 0):
        s, tail, finite = None, 0.0, True
    elif np.any(shell_v == 0):
        s, tail, finite = None, 0.0, True
    else:
        slope, logc = np.polyfit(np.log(shell_r), np.log(shell_v), 1)
        s = float(-slope)
        finite = s > d + 0.1
        tail = (_unit_sphere_area(d) * math.exp(logc) * half ** (d - s) / (s - d)) if finite else math.inf
    lp = (core + tail) ** (1.0 / p) if finite else math.inf
    conds = {"inner_bound": C2 > 0, "growth_bound": bool(np.isfinite(C3)), "b2_in_Lp": bool(finite)}
    verdict = WITNESSED if all(conds.values()) else NOT_ESTABLISHED
    return SplitDriftReport(C1, C2, C3, float(lp), s, verdict, conds)


# --- mollification ladder -------------------------------------------------

@dataclass
class MollificationReport:
    k: list
    sup_ball: list
    harnack: list
    l1_differences: list
    modulus_lags: list
    modulus: list
    harnack_ok: bool
    differences_decreasing: bool
    modulus_ok: bool
    verdict: str
    densities: list = field(default_factory=list, repr=False)

    def report(self) -> dict:
        out = asdict(self)
        out.pop("densities")
        return out


def mollification_stability(A: Field, b: Field, grid: Grid, k_ladder=(2, 4, 8, 16), center=None,
                            radius: float = 1.0, tol: float = 1e-10, factor: float = 1.5,
                            lags=None) -> MollificationReport:
    """Solve with mollified coefficients along a k ladder and compare.

    Each density is rescaled to 1 at the node nearest ``center``; sup over
    B(center, radius), the Harnack ratio on B(center, radius/2) and the grid
    modulus there are tracked across k.  L1 differences use the probability
    normalisation.
    """
    k_ladder = list(k_ladder)
    if any(b2 <= a2 for a2, b2 in zip(k_ladder, k_ladder[1:])):
        raise DiagnosticError("k ladder must be increasing")
    d = grid.dim
    center = np.zeros(d) if center is None else np.atleast_1d(np.asarray(center, float))
    idx = grid.nearest_index(center)
    ball = _ball_mask(grid, center, radius)
    half = _ball_mask(grid, center, radius / 2)
    lags = np.asarray(lags if lags is not None else np.array([1, 2, 4, 8]) * float(grid.h.max()), float)
    sups, ratios, mods, dens = [], [], [], []
    for k in k_ladder:
        Ak = mollify(A, k, grid)
        bk = mollify(b, k, grid)
        sol = solve_stationary(StationaryProblem(grid, Ak, bk), tol)
        dens.append(sol.rho)
        scaled = sol.rho / sol.rho[idx]
        sups.append(float(scaled[ball].max()))
        ratios.append(harnack_ratio(sol.rho, center, radius / 2, grid).ratio)
        mods.append(uniform_modulus(scaled, grid, lags, region=half).values.tolist())
    diffs = [float(grid.integrate(np.abs(p - q))) for p, q in zip(dens, dens[1:])]
    med = float(np.median(ratios))
    harnack_ok = max(ratios) <= factor * med
    decreasing = all(b2 < a2 for a2, b2 in zip(diffs, diffs[1:]))
    m = np.array(mods)
    modulus_ok = bool(np.all(m.max(axis=0) <= factor * np.median(m, axis=0) + 1e-15))
    verdict = WITNESSED if harnack_ok and decreasing and modulus_ok else NOT_ESTABLISHED
    return MollificationReport(k_ladder, sups, ratios, diffs, lags.tolist(), mods, bool(harnack_ok),
                               bool(decreasing), modulus_ok, verdict, dens)


# --- uniqueness -----------------------------------------------------------

@dataclass
class UniquenessReport:
    integral_a: float
    integral_b: float
    tail_a: float
    tail_b: float
    condition_i: str
    condition_ii: str
    lyapunov: dict | None
    verdict: str

    def report(self) -> dict:
        return asdict(self)


def uniqueness_conditions(A: Field, b: Field, rho, grid: Grid | None = None, V=None, radii=None,
                          grad=None, hess=None, band: float = 0.05) -> UniquenessReport:
    """Weighted integrability of A and b against rho, or LV <= C1 + C2 V."""
    grid, r = _density(rho, grid)
    d = grid.dim
    x = grid.points()
    a = np.asarray(sample(A, grid), float).reshape(grid.shape + (d, d))
    bv = np.asarray(sample(b, grid), float).reshape(grid.shape + (d,))
    nx = np.linalg.norm(x, axis=-1)
    fa = np.abs(np.linalg.eigvalsh(a)).max(axis=-1) / (1 + nx) ** 2 * r
    fb = np.linalg.norm(bv, axis=-1) / (1 + nx) * r
    lo, hi = np.array(grid.lo), np.array(grid.hi)
    outer = np.any((x - lo < band * (hi - lo)) | (hi - x < band * (hi - lo)), axis=-1)
    Ia, Ib = grid.integrate(fa), grid.integrate(fb)
    cond_i = WITNESSED if math.isfinite(Ia) and math.isfinite(Ib) else NOT_ESTABLISHED
    cond_ii, lyap = NOT_ESTABLISHED, None
    if V is not None:
        if radii is None:
            half = 0.5 * float(np.min(hi - lo))
            radii = np.linspace(0.1, 1.0, 10) * half
        rep = lyapunov_check(A, b, V, radii, dim=d, grad=grad, hess=hess)
        lyap = rep.report()
        cond_ii = rep.linear_growth
    verdict = WITNESSED if WITNESSED in (cond_i, cond_ii) else NOT_ESTABLISHED
    return UniquenessReport(Ia, Ib, grid.integrate(np.where(outer, fa, 0.0)),
                            grid.integrate(np.where(outer, fb, 0.0)), cond_i, cond_ii, lyap, verdict)
