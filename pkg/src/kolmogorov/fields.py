"""Uniform grids and coefficient fields.

A field is anything with ``value_shape`` that maps an array of points of
shape ``(..., d)`` to values of shape ``(...,) + value_shape``.  Three
backends exist: expressions (:class:`ExprField`), node samples with
multilinear interpolation (:class:`SampledField`) and plain numpy callables
(:class:`CallableField`).
"""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import coeffexpr

MAX_NODES = 2_000_000


class FieldError(ValueError):
    pass


# --- grid -----------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform Cartesian box; nodes stored row-major over axes (x1 slowest)."""

    lo: tuple
    hi: tuple
    n: tuple
    max_nodes: int = MAX_NODES

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        if not (len(lo) == len(hi) == len(n)) or len(n) not in (1, 2, 3):
            raise FieldError(f"grid needs matching lo/hi/n of length 1..3, got {lo}, {hi}, {n}")
        for a, b, m in zip(lo, hi, n):
            if not b > a:
                raise FieldError(f"degenerate box axis [{a}, {b}]")
            if m < 3:
                raise FieldError(f"need at least 3 nodes per axis, got {m}")
        if math.prod(n) > self.max_nodes:
            raise FieldError(f"{math.prod(n)} nodes exceeds cap {self.max_nodes}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n", n)

    @classmethod
    def uniform(cls, lo, hi, n, dim: int = 1) -> "Grid":
        """Same bounds and node count on every axis."""
        return cls((lo,) * dim, (hi,) * dim, (n,) * dim)

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple:
        return self.n

    @property
    def size(self) -> int:
        return math.prod(self.n)

    @property
    def h(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / (np.array(self.n) - 1)

    @property
    def axes(self) -> list:
        return [np.linspace(a, b, m) for a, b, m in zip(self.lo, self.hi, self.n)]

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def mesh(self) -> list:
        return np.meshgrid(*self.axes, indexing="ij")

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (d,)``."""
        return np.stack(self.mesh(), axis=-1)

    def trapezoid_weights(self) -> np.ndarray:
        w = 1.0
        for h, m in zip(self.h, self.n):
            wa = np.full(m, h)
            wa[[0, -1]] = h / 2
            w = np.multiply.outer(w, wa)
        return np.asarray(w)

    def integrate(self, values: np.ndarray) -> float:
        """Trapezoid rule over the box."""
        return float(np.sum(self.trapezoid_weights() * values))

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, float)
        span = np.array(self.hi) - np.array(self.lo)
        return np.all((x >= np.array(self.lo) - tol * span) & (x <= np.array(self.hi) + tol * span), axis=-1)

    def nearest_index(self, x) -> tuple:
        x = np.asarray(x, float)
        idx = np.rint((x - np.array(self.lo)) / self.h).astype(int)
        return tuple(int(i) for i in np.clip(idx, 0, np.array(self.n) - 1))

    def node(self, index) -> np.ndarray:
        return np.array(self.lo) + np.asarray(index) * self.h

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, bool)
        for ax in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[ax] = 0
            mask[tuple(sl)] = True
            sl[ax] = -1
            mask[tuple(sl)] = True
        return mask

    def distance_from(self, center) -> np.ndarray:
        return np.linalg.norm(self.points() - np.asarray(center, float), axis=-1)

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.lo, self.hi, tuple((m - 1) * factor + 1 for m in self.n))


@dataclass(frozen=True)
class GridArray:
    """One finite real per grid node."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.size != self.grid.size:
            raise FieldError(f"GridArray has {v.size} values for {self.grid.size} nodes")
        v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise FieldError("GridArray values must be finite")
        object.__setattr__(self, "values", v)

    def integral(self) -> float:
        return self.grid.integrate(self.values)

    def as_field(self) -> "SampledField":
        return SampledField(self.grid, self.values)


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        if not self.radius > 0:
            raise FieldError(f"ball radius must be positive, got {self.radius}")

    @classmethod
    def with_support(cls, center, support_radius: float) -> "Ball":
        """Ball whose fourfold enlargement B(x0, 4R) has the given radius."""
        return cls(center, support_radius / 4.0)

    @property
    def support_radius(self) -> float:
        return 4.0 * self.radius

    def fits_in(self, grid: Grid, factor: float = 4.0) -> bool:
        c = np.array(self.center)
        r = factor * self.radius
        return bool(np.all(c - r >= np.array(grid.lo)) and np.all(c + r <= np.array(grid.hi)))


# --- fields ---------------------------------------------------------------

class Field:
    value_shape: tuple = ()
    dim: int = 1

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError

    @property
    def kind(self) -> str:
        return {0: "scalar", 1: "vector", 2: "matrix"}[len(self.value_shape)]


def _symmetrize(values: np.ndarray) -> np.ndarray:
    """Mirror the upper triangle onto the lower one (last two axes)."""
    upper = np.triu(np.ones(values.shape[-2:], bool))
    return np.where(upper, values, np.swapaxes(values, -1, -2))


class ExprField(Field):
    """Field given by one expression per (upper-triangle) component."""

    def __init__(self, sources, kind: str = "scalar", dim: int = 1):
        self.dim = dim
        if kind == "scalar":
            sources = [sources] if isinstance(sources, (str, int, float)) else list(sources)
            self.value_shape = ()
        elif kind == "vector":
            self.value_shape = (dim,)
        elif kind == "matrix":
            self.value_shape = (dim, dim)
        else:
            raise FieldError(f"unknown field kind {kind!r}")
        flat = np.array(sources, dtype=object).reshape(self.value_shape or (1,))
        self.sources = flat
        self.exprs = np.empty(flat.shape, dtype=object)
        for idx in np.ndindex(flat.shape):
            src = flat[idx]
            if kind == "matrix" and idx[0] > idx[1]:
                continue
            self.exprs[idx] = coeffexpr.parse(str(src))
            extra = coeffexpr.variables(self.exprs[idx]) - {f"x{i + 1}" for i in range(dim)}
            if extra:
                raise FieldError(f"expression {src!r} uses {sorted(extra)} outside dimension {dim}")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        env = {f"x{i + 1}": x[..., i] for i in range(self.dim)}
        base = x.shape[:-1]
        out = np.empty(base + (self.value_shape or (1,)))
        for idx in np.ndindex(self.exprs.shape):
            e = self.exprs[idx]
            if e is None:
                continue
            out[(...,) + idx] = coeffexpr.evaluate_array(e, env)
        if self.value_shape == ():
            return out[..., 0]
        if len(self.value_shape) == 2:
            out = _symmetrize(out)
        return out


class CallableField(Field):
    """Wrap a numpy function ``f(points) -> values``."""

    def __init__(self, func: Callable, value_shape: tuple = (), dim: int = 1):
        self.func = func
        self.value_shape = tuple(value_shape)
        self.dim = dim

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        v = np.asarray(self.func(x), float)
        v = np.broadcast_to(v, x.shape[:-1] + self.value_shape).copy()
        if len(self.value_shape) == 2:
            v = _symmetrize(v)
        return v


class ConstantField(Field):
    def __init__(self, value, dim: int = 1):
        self.value = np.asarray(value, float)
        self.value_shape = self.value.shape
        self.dim = dim
        if len(self.value_shape) == 2:
            self.value = _symmetrize(self.value)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return np.broadcast_to(self.value, x.shape[:-1] + self.value_shape).copy()


class SampledField(Field):
    """Node samples with multilinear interpolation.

    Points outside the box raise unless ``outside`` is ``"clamp"`` (nearest
    box point) or ``"zero"`` (value 0).
    """

    def __init__(self, grid: Grid, values, outside: str = "raise"):
        values = np.asarray(values, float)
        if values.shape[: grid.dim] != grid.shape:
            values = values.reshape(grid.shape + values.shape[1:])
        self.grid = grid
        self.dim = grid.dim
        self.value_shape = values.shape[grid.dim:]
        if len(self.value_shape) == 2:
            values = _symmetrize(values)
        if not np.all(np.isfinite(values)):
            raise FieldError("sampled field has non-finite values")
        self.values = values
        self.outside = outside

    def with_outside(self, outside: str) -> "SampledField":
        f = SampledField.__new__(SampledField)
        f.__dict__.update(self.__dict__)
        f.outside = outside
        return f

    def __call__(self, x) -> np.ndarray:
        return interpolate(self.grid, self.values, x, outside=self.outside)

    def gradient(self) -> np.ndarray:
        """Centered differences inside, one-sided second order at the boundary.

        Returns shape ``grid.shape + value_shape + (d,)``.
        """
        return grid_gradient(self.grid, self.values)


def grid_gradient(grid: Grid, values: np.ndarray) -> np.ndarray:
    g = np.gradient(values, *grid.h, axis=tuple(range(grid.dim)), edge_order=2)
    if grid.dim == 1:
        g = [g]
    return np.stack(g, axis=-1)


def interpolate(grid: Grid, values: np.ndarray, x, outside: str = "raise") -> np.ndarray:
    """Multilinear interpolation of node ``values`` at points ``x`` (..., d)."""
    x = np.asarray(x, float)
    d = grid.dim
    if x.shape[-1] != d:
        raise FieldError(f"points have dimension {x.shape[-1]}, grid has {d}")
    lo = np.array(grid.lo)
    hi = np.array(grid.hi)
    inside = grid.contains(x)
    if outside == "raise" and not np.all(inside):
        bad = np.argwhere(~np.atleast_1d(inside))[0]
        raise FieldError(f"point {x.reshape(-1, d)[bad[0]] if x.ndim > 1 else x} outside grid box")
    xc = np.clip(x, lo, hi)
    s = (xc - lo) / grid.h
    i0 = np.clip(np.floor(s).astype(int), 0, np.array(grid.n) - 2)
    t = s - i0
    vshape = values.shape[d:]
    out = np.zeros(x.shape[:-1] + vshape)
    for corner in np.ndindex(*(2,) * d):
        w = np.ones(x.shape[:-1])
        idx = []
        for ax, c in enumerate(corner):
            w = w * (t[..., ax] if c else 1.0 - t[..., ax])
            idx.append(i0[..., ax] + c)
        out += w.reshape(w.shape + (1,) * len(vshape)) * values[tuple(idx)]
    if outside == "zero":
        out = np.where(inside.reshape(inside.shape + (1,) * len(vshape)), out, 0.0)
    return out


def scalar_field(source, dim: int = 1) -> Field:
    if isinstance(source, Field):
        return source
    if isinstance(source, (int, float)):
        return ConstantField(float(source), dim)
    if isinstance(source, str):
        return ExprField(source, "scalar", dim)
    if callable(source):
        return CallableField(source, (), dim)
    raise FieldError(f"cannot build scalar field from {source!r}")


def vector_field(source, dim: int) -> Field:
    if isinstance(source, Field):
        return source
    if callable(source):
        return CallableField(source, (dim,), dim)
    source = list(source)
    if len(source) != dim:
        raise FieldError(f"vector field needs {dim} components, got {len(source)}")
    if all(isinstance(s, (int, float)) for s in source):
        return ConstantField(np.array(source, float), dim)
    return ExprField([str(s) for s in source], "vector", dim)


def matrix_field(source, dim: int) -> Field:
    if isinstance(source, Field):
        return source
    if callable(source):
        return CallableField(source, (dim, dim), dim)
    arr = np.array(source, dtype=object)
    if arr.shape != (dim, dim):
        raise FieldError(f"matrix field needs {dim}x{dim} entries, got shape {arr.shape}")
    if all(isinstance(s, (int, float)) for s in arr.flat):
        return ConstantField(arr.astype(float), dim)
    return ExprField([[str(s) for s in row] for row in arr], "matrix", dim)


def identity_field(dim: int) -> ConstantField:
    return ConstantField(np.eye(dim), dim)


# --- operations -----------------------------------------------------------

def sample(field: Field, grid: Grid) -> np.ndarray:
    """Evaluate ``field`` at every node; shape ``grid.shape + value_shape``."""
    pts = grid.points()
    try:
        values = np.asarray(field(pts), float)
    except coeffexpr.EvalDomainError as exc:
        if exc.mask is not None and exc.mask.shape == grid.shape:
            node = tuple(int(i) for i in np.unravel_index(int(np.argmax(exc.mask)), grid.shape))
            raise FieldError(f"evaluation failed at node {node} ({grid.node(node)}): {exc}") from exc
        raise FieldError(f"evaluation failed: {exc}") from exc
    bad = ~np.isfinite(values)
    if np.any(bad):
        node = np.unravel_index(int(np.argmax(bad.reshape(grid.shape + (-1,)).any(axis=-1))), grid.shape)
        raise FieldError(f"non-finite value at node {node} ({grid.node(node)})")
    return values


def sampled(field: Field, grid: Grid) -> SampledField:
    return SampledField(grid, sample(field, grid))


def bump_kernel(grid: Grid, radius: float) -> np.ndarray:
    """Normalised (1-|x|^2)^3 bump sampled at node offsets within ``radius``."""
    m = np.floor(radius / grid.h + 1e-12).astype(int)
    if np.any(m < 1):
        raise FieldError(
            f"mollifier radius {radius:g} covers fewer than 3 nodes on some axis (h={grid.h})"
        )
    offs = np.meshgrid(*[np.arange(-k, k + 1) * h for k, h in zip(m, grid.h)], indexing="ij")
    r2 = sum(o**2 for o in offs) / radius**2
    k = np.where(r2 < 1.0, (1.0 - r2) ** 3, 0.0)
    return k / k.sum()


def mollify(field: Field, k: int, grid: Grid) -> SampledField:
    """Convolve with the bump rescaled to radius 1/k, renormalised at the box edge."""
    if k < 1:
        raise FieldError(f"mollification index must be >= 1, got {k}")
    radius = 1.0 / k
    if np.any(grid.h > radius / 4):
        warnings.warn(f"grid spacing {grid.h} does not resolve mollifier radius 1/{k}", stacklevel=2)
    kern = bump_kernel(grid, radius)
    values = field.values if isinstance(field, SampledField) and field.grid == grid else sample(field, grid)
    ones = ndimage.correlate(np.ones(grid.shape), kern, mode="constant", cval=0.0)
    flat = values.reshape(grid.shape + (-1,))
    out = np.empty_like(flat)
    for c in range(flat.shape[-1]):
        # convolving the deviation from a reference keeps constants exact
        ref = flat[..., c].flat[0]
        dev = ndimage.correlate(flat[..., c] - ref, kern, mode="constant", cval=0.0)
        out[..., c] = ref + dev / ones
    return SampledField(grid, out.reshape(values.shape))


def smooth_step_down(r, inner: float, outer: float) -> np.ndarray:
    """C^2 radial cutoff: 1 for r <= inner, 0 for r >= outer."""
    s = np.clip((np.asarray(r, float) - inner) / (outer - inner), 0.0, 1.0)
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def extend_diffusion(A: Field, ball: Ball, inner: float, outer: float) -> CallableField:
    """psi*A + (1-psi)*I with psi = 1 inside ``inner`` and 0 outside ``outer``."""
    if inner < ball.support_radius:
        raise FieldError(f"inner radius {inner} smaller than 4R = {ball.support_radius}")
    if not outer > inner:
        raise FieldError(f"radii out of order: inner={inner}, outer={outer}")
    center = np.array(ball.center)
    d = A.dim

    def extended(x):
        psi = smooth_step_down(np.linalg.norm(x - center, axis=-1), inner, outer)[..., None, None]
        return psi * A(x) + (1.0 - psi) * np.eye(d)

    return CallableField(extended, (d, d), d)


def extend_drift_zero(b: Field, ball: Ball) -> CallableField:
    """b on the closed ball B(x0, 4R), zero elsewhere."""
    center = np.array(ball.center)
    rad = ball.support_radius

    def truncated(x):
        inside = np.linalg.norm(x - center, axis=-1) <= rad
        vals = np.zeros(np.asarray(x).shape[:-1] + b.value_shape)
        if np.any(inside):
            vals[inside] = b(np.asarray(x)[inside])
        return vals

    return CallableField(truncated, b.value_shape, b.dim)


def sym_eigvalsh(M: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of stacked symmetric matrices (..., d, d).

    Closed form for d <= 2, cyclic Jacobi for d = 3.
    """
    M = np.asarray(M, float)
    d = M.shape[-1]
    if not np.allclose(M, np.swapaxes(M, -1, -2), rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(M), initial=0))):
        raise FieldError("matrix field is not symmetric")
    if not np.all(np.isfinite(M)):
        raise FieldError("matrix field has non-finite entries")
    if d == 1:
        return M[..., 0, :]
    if d == 2:
        a, b, c = M[..., 0, 0], M[..., 0, 1], M[..., 1, 1]
        mean = 0.5 * (a + c)
        rad = np.hypot(0.5 * (a - c), b)
        return np.stack([mean - rad, mean + rad], axis=-1)
    return np.sort(_jacobi_eigvals(M), axis=-1)


def _jacobi_eigvals(M: np.ndarray, sweeps: int = 50) -> np.ndarray:
    A = np.array(M, float).reshape(-1, M.shape[-1], M.shape[-1])
    d = A.shape[-1]
    for _ in range(sweeps):
        off = sum(A[:, p, q] ** 2 for p in range(d) for q in range(p + 1, d))
        if np.all(off <= 1e-30 * np.maximum(1.0, np.einsum("nii->n", A**2))):
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[:, p, q]
                theta = np.where(apq != 0, (A[:, q, q] - A[:, p, p]) / (2 * np.where(apq != 0, apq, 1)), 0.0)
                t = np.where(apq != 0, np.sign(theta + (theta == 0)) / (np.abs(theta) + np.sqrt(theta**2 + 1)), 0.0)
                c = 1 / np.sqrt(t**2 + 1)
                s = t * c
                J = np.tile(np.eye(d), (A.shape[0], 1, 1))
                J[:, p, p] = c
                J[:, q, q] = c
                J[:, p, q] = s
                J[:, q, p] = -s
                A = np.swapaxes(J, 1, 2) @ A @ J
    return np.diagonal(A, axis1=1, axis2=2).reshape(M.shape[:-1])


def ellipticity_bounds(A: Field | np.ndarray, grid: Grid | None = None) -> tuple:
    """(min smallest eigenvalue, max largest eigenvalue) over the grid nodes."""
    values = A if isinstance(A, np.ndarray) else sample(A, grid)
    ev = sym_eigvalsh(values)
    return float(ev[..., 0].min()), float(ev[..., -1].max())


def check_elliptic(A: Field, grid: Grid, m: float) -> None:
    lo, hi = ellipticity_bounds(A, grid)
    if lo < m - 1e-12 or hi > 1.0 / m + 1e-12:
        raise FieldError(f"matrix field violates m*I <= A <= I/m for m={m}: eigenvalues in [{lo}, {hi}]")


# --- CSV dump -------------------------------------------------------------

def _component_names(value_shape: tuple) -> list:
    if value_shape == ():
        return ["value"]
    if len(value_shape) == 1:
        return [f"value_{i + 1}" for i in range(value_shape[0])]
    return [f"value_{i + 1}{j + 1}" for i in range(value_shape[0]) for j in range(value_shape[1])]


def to_csv(grid: Grid, values: np.ndarray) -> str:
    values = np.asarray(values, float)
    vshape = values.shape[grid.dim:]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i + 1}" for i in range(grid.dim)] + _component_names(vshape))
    pts = grid.points().reshape(-1, grid.dim)
    vals = values.reshape(grid.size, -1)
    for p, v in zip(pts, vals):
        w.writerow([f"{c:.17g}" for c in p] + [f"{c:.17g}" for c in v])
    return buf.getvalue()


def write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path: str, grid: Grid, values: np.ndarray) -> None:
    write_atomic(path, to_csv(grid, values))


def read_csv(path: str) -> tuple:
    """Inverse of :func:`write_csv`; returns ``(grid, values)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    d = sum(1 for h in header if h.startswith("x"))
    axes = [np.unique(data[:, i]) for i in range(d)]
    grid = Grid([a[0] for a in axes], [a[-1] for a in axes], [len(a) for a in axes])
    ncomp = len(header) - d
    vals = data[:, d:]
    if ncomp == 1:
        return grid, vals[:, 0].reshape(grid.shape)
    if all(len(h) == len("value_11") for h in header[d:]) and ncomp == d * d and d > 1:
        return grid, vals.reshape(grid.shape + (d, d))
    return grid, vals.reshape(grid.shape + (ncomp,))


def as_points(x: Sequence[float] | np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != dim:
        x = x[..., None]
    return x
