"""Regularity moduli of coefficient fields and the Lambda functional.

Three curves are estimated on grid data:

* the uniform modulus  omega(r) = max_{|x-y| <= r} |f(x) - f(y)|,
* the Dini mean oscillation  w(r) = sup_x avg_{B(x,r)} |f - avg_{B(x,r)} f|,
* the VMO modulus, a double average of |a(x) - a(y)| over B(z,r)^2.

Matrix-valued differences are measured in the spectral norm, vectors in the
Euclidean norm.  Curves are interpolated log-log (exact for power laws) and
extended below the smallest radius by a power-law fit C r^gamma.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .fields import Field, Grid, interpolate, sample, sym_eigvalsh

KINDS = ("uniform", "vmo", "dmo")
GAMMA_MIN = 0.1


class ModulusError(ValueError):
    pass


@dataclass(frozen=True)
class PowerFit:
    C: float
    gamma: float
    stderr: float


@dataclass
class ModulusCurve:
    radii: np.ndarray
    values: np.ndarray
    kind: str = "uniform"
    sampling: dict = field(default_factory=dict)

    def __post_init__(self):
        self.radii = np.asarray(self.radii, float)
        self.values = np.asarray(self.values, float)
        if self.kind not in KINDS:
            raise ModulusError(f"unknown curve kind {self.kind!r}")
        if self.radii.ndim != 1 or self.radii.shape != self.values.shape or len(self.radii) == 0:
            raise ModulusError("radii and values must be matching non-empty 1-D arrays")
        if np.any(np.diff(self.radii) <= 0) or self.radii[0] <= 0:
            raise ModulusError("radii must be positive and strictly increasing")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ModulusError("modulus values must be finite and nonnegative")
        if self.kind == "uniform" and np.any(np.diff(self.values) < 0):
            raise ModulusError("uniform modulus must be nondecreasing")

    @classmethod
    def from_function(cls, func, radii, kind: str = "uniform") -> "ModulusCurve":
        radii = np.asarray(radii, float)
        return cls(radii, np.asarray(func(radii), float), kind)

    def tail_fit(self, which: str = "small", points: int = 3) -> PowerFit:
        """Least-squares fit of ln w = ln C + gamma ln r on the end radii."""
        pos = self.values > 0
        r, w = self.radii[pos], self.values[pos]
        if len(r) < points:
            raise ModulusError(f"power-law fit needs {points} positive values")
        sl = slice(0, points) if which == "small" else slice(-points, None)
        x, y = np.log(r[sl]), np.log(w[sl])
        A = np.stack([np.ones_like(x), x], axis=1)
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ coef
        dof = max(points - 2, 1)
        s2 = float(resid @ resid) / dof
        cov = s2 * np.linalg.inv(A.T @ A)
        return PowerFit(float(math.exp(coef[0])), float(coef[1]), float(math.sqrt(max(cov[1, 1], 0.0))))

    def __call__(self, r) -> np.ndarray:
        """Log-log interpolation inside the sampled range."""
        r = np.asarray(r, float)
        if np.any(self.values <= 0):
            return np.interp(r, self.radii, self.values)
        return np.exp(np.interp(np.log(r), np.log(self.radii), np.log(self.values)))

    def report(self, t0: float | None = None, t=()) -> dict:
        out = {"kind": self.kind, "radii": self.radii.tolist(), "values": self.values.tolist(),
               "sampling": dict(self.sampling)}
        if len(self.radii) >= 3:
            value, conv = dini_integral(self, t0 if t0 is not None else float(self.radii[-1]))
            out["dini_integral"] = value
            out["convergent"] = conv
        if len(t) and self.kind == "uniform":
            lam = lambda_function(self, t)
            out["lambda"] = {"t": lam.t.tolist(), "values": lam.values.tolist(),
                             "extrapolation": lam.extrapolation}
        return out


# --- nodal helpers --------------------------------------------------------

def _nodal(f, grid: Grid) -> np.ndarray:
    """Node values with trailing component axes flattened: grid.shape + (m,) or matrices."""
    if isinstance(f, Field):
        vals = np.asarray(sample(f, grid), float)
    else:
        vals = np.asarray(f, float)
    if vals.shape[:grid.dim] != grid.shape:
        raise ModulusError(f"values of shape {vals.shape} do not match grid {grid.shape}")
    return vals


def _norm(diff: np.ndarray, tail: tuple) -> np.ndarray:
    """Pointwise norm of differences whose component shape is ``tail``."""
    if tail == ():
        return np.abs(diff)
    if len(tail) == 1:
        return np.linalg.norm(diff, axis=-1)
    ev = sym_eigvalsh(0.5 * (diff + np.swapaxes(diff, -1, -2)))
    return np.maximum(np.abs(ev[..., 0]), np.abs(ev[..., -1]))


def _max_norm(diff: np.ndarray, tail: tuple) -> float:
    """max of ``_norm`` over all points; matrices are pruned with |M|_F / sqrt(d) <= |M|_2 <= |M|_F."""
    if diff.size == 0:
        return 0.0
    if tail == ("sym2",):
        # packed symmetric 2x2 (a, b, c): |M|_2 = |a + c| / 2 + hypot((a - c) / 2, b)
        a, b, c = diff[..., 0], diff[..., 1], diff[..., 2]
        return float(np.max(np.abs(a + c) * 0.5 + np.hypot((a - c) * 0.5, b)))
    if len(tail) < 2:
        return float(_norm(diff, tail).max())
    sym = 0.5 * (diff + np.swapaxes(diff, -1, -2))
    fro = np.sqrt(np.einsum("...ij,...ij->...", sym, sym))
    keep = fro >= fro.max() / math.sqrt(tail[0]) * (1 - 1e-12)
    return float(_norm(sym[keep], tail).max())


def _check_radii(radii) -> np.ndarray:
    radii = np.asarray(radii, float)
    if radii.size == 0:
        raise ModulusError("empty radius list")
    if np.any(np.diff(radii) <= 0) or radii[0] <= 0:
        raise ModulusError("radii must be positive and strictly increasing")
    return radii


def _center_lattice(grid: Grid, count: int) -> list:
    axes = [np.unique(np.rint(np.linspace(0, n - 1, min(count, n))).astype(int)) for n in grid.shape]
    return list(itertools.product(*axes))


# --- uniform modulus ------------------------------------------------------

def uniform_modulus(f, grid: Grid, radii, center_samples: int | None = None,
                    region: np.ndarray | None = None) -> ModulusCurve:
    """Max of |f(x) - f(y)| over node pairs at distance <= r.

    All node pairs are swept by integer offsets; ``center_samples`` restricts x
    to a lattice of that many nodes per axis, and the boolean node mask
    ``region`` restricts both x and y.  The result is a running max over
    radii, so it is nondecreasing by construction.
    """
    radii = _check_radii(radii)
    vals = _nodal(f, grid)
    d = grid.dim
    tail = vals.shape[d:]
    h = grid.h
    kmax = [min(int(math.floor(radii[-1] / h[i] + 1e-9)), grid.shape[i] - 1) for i in range(d)]
    mask = None
    if center_samples is not None:
        if center_samples < 1:
            raise ModulusError("center_samples must be at least 1")
        mask = np.zeros(grid.shape, bool)
        for c in _center_lattice(grid, center_samples):
            mask[c] = True
    if tail == (1, 1):
        vals, tail = vals[..., 0, 0], ()
    elif tail == (2, 2):
        sym = 0.5 * (vals + np.swapaxes(vals, -1, -2))
        vals, tail = np.ascontiguousarray(np.stack([sym[..., 0, 0], sym[..., 0, 1], sym[..., 1, 1]], -1)), ("sym2",)
    best = np.zeros(len(radii))
    for off in itertools.product(*[range(-k, k + 1) for k in kmax]):
        if all(o == 0 for o in off):
            continue
        if center_samples is None and next(o for o in off if o != 0) < 0:
            continue   # symmetric pair already counted
        dist = math.sqrt(sum((o * hi) ** 2 for o, hi in zip(off, h)))
        if dist > radii[-1] * (1 + 1e-12):
            continue
        src = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, grid.shape))
        dst = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, grid.shape))
        diff = vals[dst] - vals[src]
        keep = None
        if mask is not None:
            keep = mask[src]
        if region is not None:
            keep = region[src] & region[dst] if keep is None else keep & region[src] & region[dst]
        m = _max_norm(diff if keep is None else diff[keep], tail)
        if m > 0:
            best[radii >= dist * (1 - 1e-12)] = np.maximum(best[radii >= dist * (1 - 1e-12)], m)
    best = np.maximum.accumulate(best)
    n_centers = int(mask.sum()) if mask is not None else grid.size
    return ModulusCurve(radii, best, "uniform", {"centers": n_centers, "pairs": "all", "seed": None})


# --- Dini mean oscillation -----------------------------------------------

def dini_mean_oscillation(f, grid: Grid, radii, center_samples: int = 9) -> ModulusCurve:
    """Max over a lattice of centers of the node average of |f - mean|, clipped to the box."""
    radii = _check_radii(radii)
    if radii[0] < grid.h.min() * (1 - 1e-12):
        raise ModulusError(f"radius {radii[0]:g} below grid resolution {grid.h.min():g}")
    vals = _nodal(f, grid)
    d = grid.dim
    tail = vals.shape[d:]
    flat = vals.reshape((grid.size,) + tail)
    pts = grid.points().reshape(-1, d)
    centers = _center_lattice(grid, center_samples)
    out = np.zeros(len(radii))
    for c in centers:
        dist = np.linalg.norm(pts - grid.node(c), axis=-1)
        for j, r in enumerate(radii):
            inside = dist <= r * (1 + 1e-12)
            if inside.sum() < 2:
                raise ModulusError(f"ball of radius {r:g} holds fewer than 2 nodes")
            local = flat[inside]
            osc = _norm(local - local.mean(axis=0), tail).mean()
            out[j] = max(out[j], float(osc))
    return ModulusCurve(radii, out, "dmo", {"centers": len(centers), "pairs": None, "seed": None})


# --- VMO modulus ----------------------------------------------------------

def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def _ball_samples(rng, center, r, n, grid: Grid) -> np.ndarray:
    d = len(center)
    lo, hi = np.array(grid.lo), np.array(grid.hi)
    out = np.empty((0, d))
    while len(out) < n:
        g = rng.standard_normal((2 * n, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        pts = center + g * r * rng.uniform(size=(2 * n, 1)) ** (1.0 / d)
        pts = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
        out = np.concatenate([out, pts])
    return out[:n]


def vmo_modulus(A, grid: Grid, radii, center_samples: int = 9, pair_samples: int = 4000,
                seed: int = 0, centers=None) -> ModulusCurve:
    """Per-entry double average of |a_ij(x) - a_ij(y)| over B(z,r) x B(z,r).

    Full node quadrature when the ball holds at most 64 nodes; otherwise
    Monte Carlo on ``pair_samples`` uniform pairs (field evaluated off-grid).
    ``values`` are raw double averages; ``sampling['scaled_values']`` holds
    them multiplied by |B(z,r)|^2 / r^{2d} = |B_1|^2.
    """
    radii = _check_radii(radii)
    if pair_samples < 1000:
        raise ModulusError("pair_samples must be at least 1000")
    d = grid.dim
    if isinstance(A, Field):
        func = A
    else:
        arr = _nodal(A, grid)
        func = lambda x: interpolate(grid, arr, x)   # noqa: E731
    vals = _nodal(A, grid)
    tail = vals.shape[d:]
    flat = vals.reshape((grid.size, -1))
    pts = grid.points().reshape(-1, d)
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = [grid.node(c) for c in _center_lattice(grid, center_samples)]
    centers = [np.atleast_1d(np.asarray(z, float)) for z in centers]
    out = np.zeros(len(radii))
    stderr = np.zeros(len(radii))
    methods = []
    for z in centers:
        dist = np.linalg.norm(pts - z, axis=-1)
        for j, r in enumerate(radii):
            inside = dist <= r * (1 + 1e-12)
            k = int(inside.sum())
            if k <= 64:
                if k < 2:
                    raise ModulusError(f"degenerate ball: radius {r:g} holds {k} node(s)")
                local = flat[inside]
                diff = np.abs(local[:, None, :] - local[None, :, :]).mean(axis=(0, 1))
                val, err = float(diff.max()), 0.0
                methods.append("quadrature")
            else:
                x = _ball_samples(rng, z, r, pair_samples, grid)
                y = _ball_samples(rng, z, r, pair_samples, grid)
                fx = np.asarray(func(x), float).reshape(pair_samples, -1)
                fy = np.asarray(func(y), float).reshape(pair_samples, -1)
                diff = np.abs(fx - fy)
                means = diff.mean(axis=0)
                e = int(np.argmax(means))
                val = float(means[e])
                err = float(diff[:, e].std(ddof=1) / math.sqrt(pair_samples))
                methods.append("monte_carlo")
            if val >= out[j]:
                out[j], stderr[j] = val, err
    scale = unit_ball_volume(d) ** 2
    sampling = {"centers": len(centers), "pairs": pair_samples, "seed": seed,
                "stderr": stderr.tolist(), "scaled_values": (out * scale).tolist(),
                "scale_convention": "scaled = raw * |B(z,r)|^2 / r^(2d)",
                "methods": sorted(set(methods)), "entries": list(tail)}
    return ModulusCurve(radii, out, "vmo", sampling)


# --- Dini integral --------------------------------------------------------

def _segment_integral(r0, r1, w0, w1) -> float:
    """Integral of w(r)/r over [r0, r1] for the log-log interpolant of w."""
    L = math.log(r1 / r0)
    if w0 <= 0 or w1 <= 0:
        return 0.5 * (w0 / r0 + w1 / r1) * (r1 - r0)
    g = math.log(w1 / w0) / L
    if abs(g * L) < 1e-12:
        return w0 * L
    return w0 / g * math.expm1(g * L)


def dini_integral(curve: ModulusCurve, t0: float) -> tuple:
    """(value of int_0^t0 w(r)/r dr, convergent flag).

    Sampled range: exact integral of the log-log interpolant.  Below the
    smallest radius: the power-law fit C r^gamma, integrated in closed form
    when convergent.  The flag requires gamma - 2 stderr > 0.1.
    """
    r, w = curve.radii, curve.values
    if len(r) < 3:
        raise ModulusError("dini_integral needs at least 3 radii")
    if t0 > r[-1] * (1 + 1e-12):
        raise ModulusError(f"t0={t0:g} exceeds the largest radius {r[-1]:g}")
    total = 0.0
    for i in range(len(r) - 1):
        if r[i] >= t0:
            break
        r1 = min(r[i + 1], t0)
        w1 = float(curve(r1)) if r1 < r[i + 1] else w[i + 1]
        total += _segment_integral(r[i], r1, w[i], w1)
    if np.all(w[:3] == 0):
        return total, True
    if np.any(w[:3] == 0):
        return total, True   # modulus vanishes at small radii
    fit = curve.tail_fit("small")
    convergent = fit.gamma - 2 * fit.stderr > GAMMA_MIN
    if convergent:
        total += fit.C * r[0] ** fit.gamma / fit.gamma
    else:
        total = math.inf
    return total, bool(convergent)


# --- Lambda functional ----------------------------------------------------

@dataclass
class LambdaReport:
    t: np.ndarray
    values: np.ndarray
    inverse_table: np.ndarray     # rows (s, omega^{-1}(s))
    error_estimate: float
    extrapolation: list


def _inverse_log_table(curve: ModulusCurve, s_lo: float, s_hi: float) -> tuple:
    """Breakpoints (ln s, ln omega^{-1}(s)) covering [s_lo, s_hi], plus the policies used."""
    if curve.kind != "uniform":
        raise ModulusError("Lambda needs a uniform-kind modulus")
    r, w = curve.radii, curve.values
    if np.any(w <= 0) or np.any(np.diff(w) <= 0):
        raise ModulusError("omega must be positive and strictly increasing to be inverted")
    lv, lr = list(np.log(w)), list(np.log(r))
    policy = []
    if s_lo < w[0]:
        fit = curve.tail_fit("small")
        if fit.gamma <= 0:
            raise ModulusError("small-radius fit is not increasing; cannot extrapolate omega^{-1}")
        ls = math.log(s_lo)
        lv.insert(0, ls)
        lr.insert(0, (ls - math.log(fit.C)) / fit.gamma)
        policy.append(f"power-law below r={r[0]:g}: omega ~ {fit.C:.6g} r^{fit.gamma:.6g}")
    if s_hi > w[-1]:
        fit = curve.tail_fit("large")
        if fit.gamma <= 0:
            raise ModulusError("large-radius fit is not increasing; cannot extrapolate omega^{-1}")
        ls = math.log(s_hi)
        lv.append(ls)
        lr.append((ls - math.log(fit.C)) / fit.gamma)
        policy.append(f"power-law above r={r[-1]:g}: omega ~ {fit.C:.6g} r^{fit.gamma:.6g}")
    return np.array(lv), np.array(lr), policy


def _lambda_exact(v_nodes, lr_nodes, a: float) -> float:
    """int_a^0 -ln omega^{-1}(e^v) e^v dv with ln omega^{-1} piecewise linear in v."""
    total = 0.0
    vs = np.concatenate([[a], v_nodes[(v_nodes > a) & (v_nodes < 0)], [0.0]])
    vals = np.interp(vs, v_nodes, lr_nodes)
    for v0, v1, g0, g1 in zip(vs[:-1], vs[1:], vals[:-1], vals[1:]):
        if v1 <= v0:
            continue
        beta = (g1 - g0) / (v1 - v0)
        alpha = g0 - beta * v0
        prim = lambda v: math.exp(v) * (alpha + beta * v - beta)   # noqa: E731
        total -= prim(v1) - prim(v0)
    return total


def lambda_function(omega: ModulusCurve, t) -> LambdaReport:
    """Lambda(t) = -int_{1/t}^1 ln omega^{-1}(s) ds for t >= 1.

    omega^{-1} is the inverse of the log-log interpolant, piecewise linear in
    (ln s, ln r), so the integral is evaluated segment by segment in closed
    form after substituting s = e^v.  ``error_estimate`` compares with a
    trapezoid rule on twice as many points.
    """
    t = np.atleast_1d(np.asarray(t, float))
    if np.any(t < 1):
        raise ModulusError("Lambda is defined for t >= 1")
    lv, lr, policy = _inverse_log_table(omega, float(1.0 / t.max()), 1.0)
    values = np.array([_lambda_exact(lv, lr, -math.log(ti)) for ti in t])
    # independent check: trapezoid in v on a fine grid for the largest t
    a = -math.log(t.max())
    if a < 0:
        v = np.linspace(a, 0.0, 4001)
        g = -np.interp(v, lv, lr) * np.exp(v)
        trap = float(np.sum(0.5 * (g[1:] + g[:-1]) * np.diff(v)))
        err = abs(trap - _lambda_exact(lv, lr, a))
    else:
        err = 0.0
    table = np.stack([np.exp(lv), np.exp(lr)], axis=1)
    return LambdaReport(t, values, table, err, policy)


# --- composition with a change of variables -------------------------------

def composition_constant(f: Field, zmap, grid: Grid, radii, gamma: float | None = None,
                         center_samples: int = 9) -> dict:
    """Smallest C with w~(r) <= C (w(2r) + r^gamma), w~ the DMO curve of f o Phi.

    ``gamma`` defaults to the fitted Hoelder exponent of Phi' (clipped to (0, 1]).
    """
    radii = _check_radii(radii)
    vals = np.asarray(f(zmap.forward(grid.points())), float)
    w_tilde = dini_mean_oscillation(vals, grid, radii, center_samples)
    w2 = dini_mean_oscillation(f, grid, 2 * radii, center_samples)
    if gamma is None:
        jac = uniform_modulus(zmap.du, grid, radii)
        if np.all(jac.values[:3] > 0):
            gamma = float(np.clip(jac.tail_fit("small").gamma, 1e-3, 1.0))
        else:
            gamma = 1.0
    bound = w2.values + radii ** gamma
    C = float(np.max(w_tilde.values / bound))
    return {"C": C, "gamma": gamma, "w_tilde": w_tilde.values.tolist(), "w_2r": w2.values.tolist()}
