"""Euler-Maruyama occupation measures for d xi = b dt + sqrt(2A) dw.

Coefficients are tabulated on a grid (b and the Cholesky factor of 2A) and
interpolated multilinearly inside a compiled kernel, which is exact for
affine drifts such as Ornstein-Uhlenbeck.  Normal increments come from a
Philox counter-based generator keyed by (seed, trajectory index), turned
into normals by Box-Muller, so every trajectory is reproducible on its own.
Trajectories reflect at the box faces, matching the no-flux PDE boundary.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .fields import Field, Grid, GridArray, sample, write_csv

DIVERGENCE_FACTOR = 10.0


class SDEError(RuntimeError):
    pass


def diffusion_sqrt(A) -> np.ndarray:
    """Lower-triangular L with L L^T = 2A, for one matrix or a stack."""
    M = 2.0 * np.asarray(A, float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ValueError("expected square matrices")
    if not np.allclose(M, np.swapaxes(M, -1, -2), rtol=0, atol=1e-14 * max(1.0, np.abs(M).max())):
        raise ValueError("matrix not symmetric")
    d = M.shape[-1]
    L = np.zeros_like(M)
    for j in range(d):
        pivot = M[..., j, j] - np.sum(L[..., j, :j] ** 2, axis=-1)
        bad = ~(pivot > 0)
        if np.any(bad):
            where = np.unravel_index(int(np.argmax(bad)), bad.shape) if bad.ndim else ()
            value = float(np.asarray(pivot)[where]) if bad.ndim else float(pivot)
            raise ValueError(f"matrix not positive definite: pivot {j} = {value:.3e} at index {where}")
        L[..., j, j] = np.sqrt(pivot)
        for i in range(j + 1, d):
            L[..., i, j] = (M[..., i, j] - np.sum(L[..., i, :j] * L[..., j, :j], axis=-1)) / L[..., j, j]
    return L


# --- random numbers -------------------------------------------------------

def philox_stream(seed: int, stream: int) -> np.random.Philox:
    """Counter-based bit generator keyed by (seed, stream)."""
    return np.random.Philox(key=np.array([seed, stream], dtype=np.uint64))


def box_muller(bg: np.random.Philox, count: int) -> np.ndarray:
    """``count`` standard normals from consecutive 53-bit uniforms of ``bg``."""
    pairs = (count + 1) // 2
    z = np.empty(2 * pairs)
    _box_muller_fill(bg.random_raw(2 * pairs), z)
    return z[:count]


@numba.njit(cache=True, error_model="numpy")
def _box_muller_fill(raw, z):
    scale = 2.0**-53
    for p in range(raw.shape[0] // 2):
        u1 = (raw[2 * p] >> np.uint64(11)) * scale
        u2 = (raw[2 * p + 1] >> np.uint64(11)) * scale
        rad = math.sqrt(-2.0 * math.log(1.0 - u1))   # 1 - u1 lies in (0, 1]
        ang = 2.0 * math.pi * u2
        z[2 * p] = rad * math.cos(ang)
        z[2 * p + 1] = rad * math.sin(ang)


# --- compiled kernel ------------------------------------------------------

@numba.njit(cache=True, error_model="numpy")
def _interp(tab, x, lo, h, shape, out, idx, frac):
    d = x.shape[0]
    for k in range(d):
        s = (x[k] - lo[k]) / h[k]
        i = int(math.floor(s))
        if i < 0:
            i = 0
        if i > shape[k] - 2:
            i = shape[k] - 2
        f = s - i
        if f < 0.0:
            f = 0.0
        if f > 1.0:
            f = 1.0
        idx[k] = i
        frac[k] = f
    for m in range(out.shape[0]):
        out[m] = 0.0
    for corner in range(1 << d):
        w = 1.0
        flat = 0
        for k in range(d):
            bit = (corner >> k) & 1
            w *= frac[k] if bit else 1.0 - frac[k]
            flat = flat * shape[k] + idx[k] + bit
        if w != 0.0:
            for m in range(out.shape[0]):
                out[m] += w * tab[flat, m]


@numba.njit(cache=True, error_model="numpy")
def _em_chunk(x, z, dt, lo, hi, h, shape, tab, hshape, counts, sums,
              start, burn, total, center, limit):
    """Advance ``x`` through len(z) steps; returns the failing step or -1."""
    d = x.shape[0]
    cv = np.empty(d + d * d)   # drift then row-major Cholesky factor
    idx = np.empty(d, np.int64)
    frac = np.empty(d)
    sq = math.sqrt(dt)
    nbatch = counts.shape[0]
    kept = total - burn
    for n in range(z.shape[0]):
        _interp(tab, x, lo, h, shape, cv, idx, frac)
        r2 = 0.0
        for k in range(d):
            inc = 0.0
            for j in range(d):
                inc += cv[d + k * d + j] * z[n, j]
            x[k] = x[k] + cv[k] * dt + sq * inc
            r2 += (x[k] - center[k]) ** 2
        if math.sqrt(r2) > limit or not math.isfinite(r2):
            return start + n
        for k in range(d):
            while x[k] < lo[k] or x[k] > hi[k]:
                if x[k] < lo[k]:
                    x[k] = 2.0 * lo[k] - x[k]
                else:
                    x[k] = 2.0 * hi[k] - x[k]
        step = start + n
        if step >= burn:
            j = step - burn
            batch = (j * nbatch) // kept
            flat = 0
            for k in range(d):
                i = int(math.floor((x[k] - lo[k]) / h[k] + 0.5))
                if i < 0:
                    i = 0
                if i > hshape[k] - 1:
                    i = hshape[k] - 1
                flat = flat * hshape[k] + i
            counts[batch, flat] += 1
            for k in range(d):
                sums[0, k] += x[k]
                sums[1, k] += x[k] * x[k]
    return -1


# --- driver ---------------------------------------------------------------

@dataclass
class SDEConfig:
    A: Field
    b: Field
    grid: Grid                  # histogram grid = reflecting box
    dt: float = 1e-3
    T: float = 100.0
    burn_in: float = 10.0
    n_traj: int = 1
    seed: int = 0
    x0: tuple | None = None
    batches: int = 20
    chunk: int = 1 << 20

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T > self.burn_in >= 0:
            raise ValueError("need T > burn_in >= 0")
        if self.n_traj < 1:
            raise ValueError("n_traj must be at least 1")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def burn_steps(self) -> int:
        return int(round(self.burn_in / self.dt))


@dataclass
class OccupationEstimate:
    grid: Grid
    density: np.ndarray
    counts: np.ndarray
    stderr: np.ndarray
    samples: int
    mean: np.ndarray
    second_moment: np.ndarray
    config: dict = field(default_factory=dict)
    runtime: float = 0.0

    @property
    def array(self) -> GridArray:
        return GridArray(self.grid, self.density)

    @property
    def variance(self) -> np.ndarray:
        return self.second_moment - self.mean**2

    def report(self, reference=None) -> dict:
        out = dict(self.config)
        out.update({"samples": self.samples, "mean": self.mean.tolist(), "variance": self.variance.tolist(),
                    "runtime_s": self.runtime})
        if reference is not None:
            out["l1_vs_reference"] = compare_densities(self.density, reference, self.grid)[0]
        return out

    def write_csv(self, path: str) -> None:
        write_csv(path, self.grid, self.density)


def _tables(config: SDEConfig):
    grid = config.grid
    d = grid.dim
    bt = np.asarray(sample(config.b, grid), float).reshape(grid.size, d)
    at = np.asarray(sample(config.A, grid), float).reshape(grid.size, d, d)
    st = diffusion_sqrt(at).reshape(grid.size, d * d)
    return np.ascontiguousarray(np.concatenate([bt, st], axis=1))


def euler_maruyama(config: SDEConfig) -> OccupationEstimate:
    """Occupation density of the reflected Euler-Maruyama chain after burn-in."""
    t0 = time.perf_counter()
    grid = config.grid
    d = grid.dim
    tab = _tables(config)
    lo = np.array(grid.lo, float)
    hi = np.array(grid.hi, float)
    h = np.asarray(grid.h, float)
    shape = np.array(grid.shape, np.int64)
    center = 0.5 * (lo + hi)
    limit = DIVERGENCE_FACTOR * 0.5 * float(np.linalg.norm(hi - lo))
    total, burn = config.steps, config.burn_steps
    if total - burn < config.batches:
        raise ValueError("too few post-burn-in steps for the batch count")
    counts = np.zeros((config.batches, grid.size), np.int64)
    sums = np.zeros((2, d))
    x_start = np.array(config.x0, float) if config.x0 is not None else center.copy()
    for traj in range(config.n_traj):
        x = x_start.copy()
        bg = philox_stream(config.seed, traj)
        step = 0
        while step < total:
            n = min(config.chunk, total - step)
            z = box_muller(bg, n * d).reshape(n, d)
            fail = _em_chunk(x, z, config.dt, lo, hi, h, shape, tab, shape,
                             counts, sums, step, burn, total, center, limit)
            if fail >= 0:
                raise SDEError(f"trajectory {traj} left |x| <= {limit:.3g} at step {fail}; "
                               "drift may lack dissipativity")
            step += n
    samples = config.n_traj * (total - burn)
    w = grid.trapezoid_weights().ravel()
    merged = counts.sum(axis=0)
    density = (merged / (samples * w)).reshape(grid.shape)
    per_batch = counts.sum(axis=1, keepdims=True)
    batch_dens = counts / (per_batch * w)
    stderr = (batch_dens.std(axis=0, ddof=1) / math.sqrt(config.batches)).reshape(grid.shape)
    info = {"samples": samples, "dt": config.dt, "burn_in": config.burn_in, "T": config.T,
            "seed": config.seed, "trajectories": config.n_traj, "rng": "philox+box-muller"}
    return OccupationEstimate(grid, density, merged.reshape(grid.shape), stderr, samples,
                              sums[0] / samples, sums[1] / samples, info, time.perf_counter() - t0)


# --- comparisons ----------------------------------------------------------

def _values_on(p, grid: Grid | None):
    if isinstance(p, GridArray):
        return p.grid, p.values
    if hasattr(p, "rho") and hasattr(p, "grid"):
        return p.grid, p.rho
    if hasattr(p, "density") and hasattr(p, "grid"):
        return p.grid, p.density
    if grid is None:
        raise ValueError("a grid is required for raw arrays")
    return grid, np.asarray(p, float)


def compare_densities(p, q, grid: Grid | None = None) -> tuple:
    """(trapezoid L1 distance, max node gap)."""
    gp, vp = _values_on(p, grid)
    gq, vq = _values_on(q, grid if grid is not None else gp)
    if gp != gq:
        raise ValueError("densities live on different grids")
    vp = np.asarray(vp, float).reshape(gp.shape)
    vq = np.asarray(vq, float).reshape(gp.shape)
    diff = np.abs(vp - vq)
    return float(gp.integrate(diff)), float(diff.max())


@dataclass
class SuperpositionReport:
    value: float
    diffusion_part: float
    drift_part: float
    tail: float


def superposition_condition(rho, A: Field, b: Field, grid: Grid | None = None,
                            band: float = 0.05) -> SuperpositionReport:
    """int (||A||_2 + |<b, x>|) / (1 + |x|^2) rho dx by trapezoid quadrature.

    ``tail`` is the part of the integral from the outer ``band`` fraction of the box.
    """
    grid, r = _values_on(rho, grid)
    r = np.asarray(r, float).reshape(grid.shape)
    d = grid.dim
    x = grid.points()
    a = np.asarray(sample(A, grid), float).reshape(grid.shape + (d, d))
    bv = np.asarray(sample(b, grid), float).reshape(grid.shape + (d,))
    norm_a = np.abs(np.linalg.eigvalsh(a)).max(axis=-1)
    weight = 1.0 / (1.0 + np.sum(x**2, axis=-1))
    f_a = norm_a * weight * r
    f_b = np.abs(np.einsum("...i,...i->...", bv, x)) * weight * r
    if not (np.all(np.isfinite(f_a)) and np.all(np.isfinite(f_b))):
        raise ValueError("non-finite integrand samples")
    lo, hi = np.array(grid.lo), np.array(grid.hi)
    outer = np.any((x - lo < band * (hi - lo)) | (hi - x < band * (hi - lo)), axis=-1)
    da, db = grid.integrate(f_a), grid.integrate(f_b)
    return SuperpositionReport(da + db, da, db, grid.integrate(np.where(outer, f_a + f_b, 0.0)))
