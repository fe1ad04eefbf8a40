"""Stationary Kolmogorov equations as discrete adjoint null-space problems.

A probability solution rho of  d_i d_j (a^{ij} rho) - d_i (b^i rho) + c rho = 0
is defined by  int (L phi) rho dx = 0  for all test functions.  The discrete
analogue is the left null vector pi of the generator matrix L_h:
sum_i (L_h phi)_i pi_i = 0 for every grid function phi.  pi is a vector of
node masses; the density is pi divided by the trapezoid weights, so that
the trapezoid integral of rho equals sum(pi).

No-flux boundaries use reflected ghost nodes, which keeps the row sums of
L_h at zero (for c = 0) and makes L_h the generator of a reflected Markov
chain.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import Ball, Field, GridArray, Grid, extend_drift_zero, write_csv
from .resolvent import DIRECT_LIMIT, SolverError, assemble_nondivergence, nodal

log = logging.getLogger(__name__)

CLIP_FRACTION = 1e-8


class PipelineError(RuntimeError):
    pass


@dataclass
class StationaryProblem:
    grid: Grid
    A: object
    b: object = None
    c: object = None
    bc: str = "noflux"
    drift: str = "fitted"
    cross: str = "monotone"

    def __post_init__(self):
        if self.bc not in ("noflux", "dirichlet"):
            raise ValueError(f"unknown boundary condition {self.bc!r}")

    def coefficients(self) -> tuple:
        d = self.grid.dim
        return (nodal(self.A, self.grid, (d, d)), nodal(self.b, self.grid, (d,)),
                nodal(self.c, self.grid, ()))


@dataclass
class DensitySolution:
    grid: Grid
    rho: np.ndarray
    residual: float
    negative_min: float
    tail_mass: float
    iterations: int
    method: str
    eigenvalue: float = 0.0
    runtime: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def array(self) -> GridArray:
        return GridArray(self.grid, self.rho)

    def integral(self) -> float:
        return self.grid.integrate(self.rho)

    def report(self) -> dict:
        out = {
            "residual": self.residual,
            "negative_min": self.negative_min,
            "tail_mass": self.tail_mass,
            "iterations": self.iterations,
            "method": self.method,
            "eigenvalue": self.eigenvalue,
            "runtime_s": self.runtime,
            "integral": self.integral(),
        }
        out.update(self.extra)
        return out

    def write_csv(self, path: str) -> None:
        write_csv(path, self.grid, self.rho)


def assemble_generator(problem: StationaryProblem) -> sp.csr_matrix:
    """L_h for L phi = a^{ij} d_ij phi + b^i d_i phi + c phi (reflecting boundary)."""
    a, b, c = problem.coefficients()
    return assemble_nondivergence(problem.grid, a, b, c, problem.drift, problem.cross)


def nullspace_dimension(L: sp.spmatrix, rtol: float = 1e-8) -> tuple:
    """Count singular values below ``rtol * s_max`` by dense SVD (small grids only)."""
    s = np.linalg.svd(L.toarray(), compute_uv=False)
    return int(np.sum(s <= rtol * s[0])), s


def boundary_band(grid: Grid, fraction: float = 0.05) -> np.ndarray:
    pts = grid.points()
    lo = np.array(grid.lo)
    hi = np.array(grid.hi)
    band = fraction * (hi - lo)
    return np.any((pts - lo < band) | (hi - pts < band), axis=-1)


def _finish(grid: Grid, pi: np.ndarray, residual: float, iterations: int, method: str,
            eigenvalue: float, t0: float) -> DensitySolution:
    if pi.sum() < 0:
        pi = -pi
    w = grid.trapezoid_weights()
    rho = pi.reshape(grid.shape) / w
    peak = rho.max()
    if not peak > 0:
        raise SolverError("stationary vector has no positive entries")
    negative_min = float(min(rho.min(), 0.0))
    if negative_min < -CLIP_FRACTION * peak:
        raise SolverError(
            f"density has negative values down to {negative_min:.3e} (peak {peak:.3e}); scheme failure"
        )
    rho = np.maximum(rho, 0.0)
    rho /= grid.integrate(rho)
    tail = grid.integrate(np.where(boundary_band(grid), rho, 0.0))
    return DensitySolution(grid, rho, float(residual), negative_min, float(tail), iterations, method,
                           float(eigenvalue), time.perf_counter() - t0)


def _inverse_power(LT: sp.spmatrix, tol: float, maxiter: int = 50):
    n = LT.shape[0]
    scale = float(abs(LT).sum(axis=0).max()) or 1.0
    eps = 1e-12 * scale
    lu = spla.splu((LT + eps * sp.identity(n, format="csc")).tocsc())
    x = np.ones(n) / n
    res = np.inf
    for it in range(1, maxiter + 1):
        x = lu.solve(x)
        x /= np.abs(x).max()
        res = np.abs(LT @ x).max() / scale
        if res < tol:
            return x, res, it
    return x, res, maxiter


def _smallest_left_eigvec(L_int: sp.spmatrix, tol: float, maxiter: int = 500):
    """Left eigenvector of the eigenvalue nearest zero (killed chain)."""
    LT = L_int.T.tocsc()
    lu = spla.splu(LT)
    x = np.ones(LT.shape[0])
    mu = 0.0
    for it in range(1, maxiter + 1):
        y = lu.solve(x)
        y /= np.abs(y).max()
        change = np.abs(np.abs(y) - np.abs(x)).max()
        x = y
        if change < tol:
            break
    mu = float(x @ (LT @ x) / (x @ x))
    return x, mu, it


def time_march(L: sp.spmatrix, pi0: np.ndarray, dt: float, steps: int) -> list:
    """Implicit Euler pi <- (I - dt L^T)^{-1} pi; returns the iterates."""
    n = L.shape[0]
    lu = spla.splu((sp.identity(n, format="csc") - dt * L.T).tocsc())
    out = [np.asarray(pi0, float)]
    for _ in range(steps):
        out.append(lu.solve(out[-1]))
    return out


def solve_stationary(problem: StationaryProblem, tol: float = 1e-10, method: str = "auto") -> DensitySolution:
    """Probability density on the grid, normalised to trapezoid integral 1."""
    t0 = time.perf_counter()
    grid = problem.grid
    L = assemble_generator(problem)
    if problem.bc == "dirichlet":
        interior = ~grid.boundary_mask().ravel()
        L_int = L[interior][:, interior]
        x, mu, its = _smallest_left_eigvec(L_int, tol)
        pi = np.zeros(grid.size)
        pi[interior] = x
        res = float(np.abs(L_int.T @ x - mu * x).max() / (abs(L_int).sum(axis=0).max()))
        return _finish(grid, pi, res, its, "inverse_power_dirichlet", mu, t0)

    if method == "auto":
        method = "inverse_power" if grid.size <= DIRECT_LIMIT else "time_marching"
    LT = L.T.tocsc()
    if method == "inverse_power":
        try:
            pi, res, its = _inverse_power(LT, tol)
        except RuntimeError as exc:
            log.warning("inverse power failed (%s); falling back to time marching", exc)
            method = "time_marching"
        else:
            if res >= tol:
                log.warning("inverse power residual %.2e above %.1e; falling back to time marching", res, tol)
                method = "time_marching"
    if method == "time_marching":
        scale = float(abs(LT).sum(axis=0).max())
        pi = np.full(grid.size, 1.0 / grid.size)
        dt = 10.0 / scale
        res = np.inf
        its = 0
        n = grid.size
        while its < 200 and res >= tol:
            A = (sp.identity(n, format="csc") - dt * LT).tocsc()
            if n <= DIRECT_LIMIT:
                pi = spla.splu(A).solve(pi)
            else:
                ilu = spla.spilu(A, drop_tol=1e-6, fill_factor=20)
                pi, info = spla.gmres(A, pi, x0=pi, rtol=1e-12, M=spla.LinearOperator(A.shape, ilu.solve))
            pi /= pi.sum()
            res = np.abs(LT @ pi).max() / scale / np.abs(pi).max()
            dt *= 2.0
            its += 1
        if res >= tol:
            msg = f"time marching stalled at residual {res:.2e}"
            if np.any(problem.coefficients()[2] != 0):
                msg += "; the zero-order term c leaves L_h^T without a null vector"
            raise SolverError(msg)
    elif method != "inverse_power":
        raise ValueError(f"unknown method {method!r}")
    return _finish(grid, pi, res, its, method, 0.0, t0)


# --- weak-form check ------------------------------------------------------

G1_SUP = 96.0 / (25.0 * np.sqrt(5.0))   # sup |d/ds (1-s^2)^3|
G2_SUP = 6.0                            # sup |d2/ds2 (1-s^2)^3|


@dataclass
class BumpBattery:
    """Tensor bumps prod_i (1 - ((x_i - c_i)/w_i)^2)^3 scaled to unit C^2 norm."""

    centers: np.ndarray    # (m, d)
    widths: np.ndarray     # (m, d)

    @classmethod
    def random(cls, grid: Grid, count: int = 20, seed: int = 0, width_range=(0.1, 0.3)) -> "BumpBattery":
        rng = np.random.default_rng(seed)
        lo = np.array(grid.lo)
        span = np.array(grid.hi) - lo
        widths = rng.uniform(*width_range, size=(count, grid.dim)) * span
        centers = lo + widths + rng.uniform(size=(count, grid.dim)) * (span - 2 * widths)
        return cls(centers, widths)

    def scale(self, k: int) -> float:
        w = self.widths[k]
        d = len(w)
        parts = [1.0]
        parts += [G1_SUP / wi for wi in w]
        parts += [G2_SUP / wi**2 for wi in w]
        parts += [G1_SUP**2 / (w[i] * w[j]) for i in range(d) for j in range(i + 1, d)]
        return 1.0 / max(parts)

    def derivatives(self, k: int, pts: np.ndarray) -> tuple:
        """phi, grad phi, Hessian phi at ``pts`` (..., d)."""
        c = self.centers[k]
        w = self.widths[k]
        d = len(c)
        s = (pts - c) / w
        inside = np.abs(s) < 1
        q = np.where(inside, 1 - s**2, 0.0)
        g0 = q**3
        g1 = np.where(inside, -6 * s * q**2, 0.0) / w
        g2 = np.where(inside, q * (30 * s**2 - 6), 0.0) / w**2
        phi = np.prod(g0, axis=-1)
        grad = np.empty(pts.shape)
        hess = np.empty(pts.shape + (d,))
        for i in range(d):
            others = np.prod(np.delete(g0, i, axis=-1), axis=-1) if d > 1 else 1.0
            grad[..., i] = g1[..., i] * others
            for j in range(d):
                if i == j:
                    hess[..., i, i] = g2[..., i] * others
                else:
                    rest = [m for m in range(d) if m not in (i, j)]
                    r = np.prod(g0[..., rest], axis=-1) if rest else 1.0
                    hess[..., i, j] = g1[..., i] * g1[..., j] * r
        sc = self.scale(k)
        return sc * phi, sc * grad, sc * hess

    def check_inside(self, grid: Grid) -> None:
        lo = np.array(grid.lo)
        hi = np.array(grid.hi)
        if np.any(self.centers - self.widths < lo - 1e-12) or np.any(self.centers + self.widths > hi + 1e-12):
            raise ValueError("bump support exits the grid box")

    def __len__(self) -> int:
        return len(self.centers)


def weak_residuals(rho, problem: StationaryProblem, battery: BumpBattery | None = None) -> np.ndarray:
    """int (a^{ij} d_ij phi + b^i d_i phi + c phi) rho dx for each bump."""
    grid = problem.grid
    rho = rho.rho if isinstance(rho, DensitySolution) else np.asarray(rho, float)
    battery = battery or BumpBattery.random(grid)
    battery.check_inside(grid)
    a, b, c = problem.coefficients()
    pts = grid.points()
    w = grid.trapezoid_weights()
    out = np.empty(len(battery))
    for k in range(len(battery)):
        phi, grad, hess = battery.derivatives(k, pts)
        Lphi = np.einsum("...ij,...ij->...", a, hess) + np.einsum("...i,...i->...", b, grad) + c * phi
        out[k] = np.sum(w * Lphi * rho)
    return out


def weak_residual(rho, problem: StationaryProblem, battery: BumpBattery | None = None) -> float:
    return float(np.max(np.abs(weak_residuals(rho, problem, battery))))


def residual_budget(problem: StationaryProblem, tol: float) -> float:
    """10 (tol + h^2 scale) with scale = sup|A| + sup|b| + sup|c| over the grid."""
    a, b, c = problem.coefficients()
    scale = float(np.max(np.abs(a))) + float(np.max(np.linalg.norm(b, axis=-1))) + float(np.max(np.abs(c)))
    h2 = float(np.max(problem.grid.h)) ** 2
    return 10.0 * (tol + h2 * scale)


# --- full pipeline --------------------------------------------------------

def solve_via_zvonkin(A: Field, b: Field, grid: Grid, ball: Ball, delta: float = 0.2,
                      tol: float = 1e-10, lam0: float = 1.0, drift: str = "fitted",
                      battery: Optional[BumpBattery] = None) -> DensitySolution:
    """Solve with drift b restricted to B(x0, 4R) through the Zvonkin change of variables.

    Build the map, push the coefficients forward, solve the transformed
    problem (drift lam u(Psi(y))), push the density back and renormalise.
    """
    from .transform import pushforward_coefficients, push_density
    from .zvonkin import build_zvonkin

    t0 = time.perf_counter()
    stage = "zvonkin"
    try:
        zmap = build_zvonkin(A, b, ball, grid, delta=delta, lam0=lam0, tol=tol, drift=drift)
        stage = "pushforward"
        tp = pushforward_coefficients(zmap, A, grid=grid)
        stage = "transformed solve"
        tprob = StationaryProblem(grid, tp.Q.values, tp.h.values, drift=drift)
        sigma = solve_stationary(tprob, tol)
        stage = "push back"
        rho = push_density(zmap, sigma.rho, grid).values
        rho = np.maximum(rho, 0.0)
        rho /= grid.integrate(rho)
        stage = "residuals"
        original = StationaryProblem(grid, A, extend_drift_zero(b, ball), drift=drift)
        battery = battery or BumpBattery.random(grid)
        res_t = weak_residual(sigma, tprob, battery)
        res_o = weak_residual(rho, original, battery)
    except Exception as exc:
        raise PipelineError(f"stage '{stage}' failed: {exc}") from exc
    tail = grid.integrate(np.where(boundary_band(grid), rho, 0.0))
    return DensitySolution(
        grid, rho, sigma.residual, sigma.negative_min, float(tail), sigma.iterations, "via_zvonkin",
        runtime=time.perf_counter() - t0,
        extra={"zvonkin": zmap.report(), "weak_residual_transformed": res_t,
               "weak_residual_original": res_o, "Q_bounds": list(tp.bounds),
               "sigma": sigma.rho},
    )
