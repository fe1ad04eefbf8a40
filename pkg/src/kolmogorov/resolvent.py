"""Nondivergence elliptic operators on grid boxes.

``assemble_nondivergence`` discretises

    L u = a^{ij} d_i d_j u + b^i d_i u + c u

with a 3^d-point stencil.  The same assembly backs the resolvent solver here
and the stationary generator in :mod:`kolmogorov.fpsolver`.

Drift schemes:

* ``"fitted"`` (default): exponentially fitted upwinding, rates
  ``a/h^2 * B(-+P)`` with ``B(z) = z/(e^z - 1)`` and cell Peclet number
  ``P = b h / a``.  Second order for smooth coefficients, reduces to
  first-order upwinding when ``|P|`` is large, and keeps an M-matrix.
* ``"upwind"``: first order, by the sign of ``b``.
* ``"centered"``: second order, refused when the cell Peclet number
  ``|b| h / (2 a)`` exceeds 1e3.

Cross derivatives default to the 7-point monotone stencil oriented by the
sign of ``a^{ij}``; ``cross="centered"`` selects the 4-point stencil.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import Field, Grid, SampledField, grid_gradient, sample

log = logging.getLogger(__name__)

DIRECT_LIMIT = 200_000
PECLET_LIMIT = 1e3


class SolverError(RuntimeError):
    pass


def nodal(value, grid: Grid, value_shape: tuple) -> np.ndarray:
    """Node values of a field, array, scalar or ``None`` (zero)."""
    if value is None:
        return np.zeros(grid.shape + value_shape)
    if isinstance(value, Field):
        return np.asarray(sample(value, grid), float).reshape(grid.shape + value_shape)
    arr = np.asarray(value, float)
    if arr.shape == grid.shape + value_shape:
        return arr
    return np.broadcast_to(arr, grid.shape + value_shape).copy()


def bernoulli(z: np.ndarray) -> np.ndarray:
    """B(z) = z / (exp(z) - 1), B(0) = 1."""
    z = np.asarray(z, float)
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    with np.errstate(over="ignore"):
        out = safe / np.expm1(safe)
    return np.where(small, 1.0 - z / 2.0, out)


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.where(idx < 0, -idx, idx)
    return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)


def stencil_coefficients(grid: Grid, a: np.ndarray, b: np.ndarray, drift: str = "fitted",
                         cross: str = "monotone") -> dict:
    """Per-node stencil weights keyed by offset tuples in {-1,0,1}^d."""
    d = grid.dim
    h = grid.h
    zero = (0,) * d
    coef = {zero: np.zeros(grid.shape)}

    def add(offset, w):
        coef[offset] = coef.get(offset, 0.0) + w

    for i in range(d):
        e_plus = tuple(1 if k == i else 0 for k in range(d))
        e_minus = tuple(-1 if k == i else 0 for k in range(d))
        aii = a[..., i, i]
        bi = b[..., i]
        diff = aii / h[i] ** 2
        if drift == "fitted":
            peclet = bi * h[i] / aii
            r_plus = diff * bernoulli(-peclet)
            r_minus = diff * bernoulli(peclet)
        elif drift == "upwind":
            r_plus = diff + np.maximum(bi, 0.0) / h[i]
            r_minus = diff + np.maximum(-bi, 0.0) / h[i]
        elif drift == "centered":
            cell_peclet = np.abs(bi) * h[i] / (2 * aii)
            if np.any(cell_peclet > PECLET_LIMIT):
                raise SolverError(
                    f"cell Peclet number {cell_peclet.max():.3g} exceeds {PECLET_LIMIT:g} with the "
                    "centered drift scheme; use drift='upwind' or 'fitted'"
                )
            r_plus = diff + bi / (2 * h[i])
            r_minus = diff - bi / (2 * h[i])
        else:
            raise ValueError(f"unknown drift scheme {drift!r}")
        add(e_plus, r_plus)
        add(e_minus, r_minus)
        add(zero, -(r_plus + r_minus))

    for i, j in itertools.combinations(range(d), 2):
        aij = a[..., i, j]
        hh = h[i] * h[j]

        def off(si, sj):
            return tuple(si if k == i else sj if k == j else 0 for k in range(d))

        if cross == "centered":
            w = 2 * aij / (4 * hh)
            add(off(1, 1), w)
            add(off(-1, -1), w)
            add(off(1, -1), -w)
            add(off(-1, 1), -w)
        elif cross == "monotone":
            pos = np.maximum(aij, 0.0) / hh
            neg = np.maximum(-aij, 0.0) / hh
            add(off(1, 1), pos)
            add(off(-1, -1), pos)
            add(off(1, -1), neg)
            add(off(-1, 1), neg)
            for s in (1, -1):
                add(off(s, 0), -(pos + neg))
                add(off(0, s), -(pos + neg))
            add(zero, 2 * (pos + neg))
        else:
            raise ValueError(f"unknown cross-derivative stencil {cross!r}")
    return coef


def assemble_nondivergence(grid: Grid, A, b=None, c=None, drift: str = "fitted",
                           cross: str = "monotone") -> sp.csr_matrix:
    """Sparse matrix of ``L u = tr(A D^2 u) + <b, grad u> + c u`` on all nodes.

    Boundary rows use reflected ghost nodes (homogeneous Neumann); callers
    imposing Dirichlet data overwrite them.
    """
    d = grid.dim
    a = nodal(A, grid, (d, d))
    bv = nodal(b, grid, (d,))
    cv = nodal(c, grid, ())
    coef = stencil_coefficients(grid, a, bv, drift, cross)
    coef[(0,) * d] = coef[(0,) * d] + cv
    index = np.arange(grid.size).reshape(grid.shape)
    grids = np.meshgrid(*[np.arange(m) for m in grid.n], indexing="ij")
    rows, cols, data = [], [], []
    for offset, w in coef.items():
        w = np.broadcast_to(w, grid.shape)
        target = tuple(_reflect(g + o, m) for g, o, m in zip(grids, offset, grid.n))
        rows.append(index.ravel())
        cols.append(index[target].ravel())
        data.append(w.ravel())
    mat = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )
    return mat.tocsr()


@dataclass
class EllipticProblem:
    """tr(A D^2 u) + <beta, grad u> - lam u = f, u = boundary on the box edge."""

    grid: Grid
    A: object
    f: object = None
    beta: object = None
    lam: float = 0.0
    boundary: object = 0.0
    drift: str = "fitted"
    cross: str = "monotone"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


@dataclass
class EllipticSolution:
    grid: Grid
    u: np.ndarray
    residual: float
    iterations: int
    method: str
    gradient: Optional[np.ndarray] = None
    residual_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.gradient is None:
            self.gradient = grid_gradient(self.grid, self.u)

    @property
    def sup_grad(self) -> float:
        """Grid-sup of |grad u|."""
        return float(np.max(np.linalg.norm(self.gradient, axis=-1)))

    def as_field(self) -> SampledField:
        return SampledField(self.grid, self.u)


def _dirichlet_system(grid: Grid, L: sp.csr_matrix, rhs: np.ndarray, fixed: np.ndarray,
                      values: np.ndarray):
    """Replace rows of ``fixed`` nodes with identity rows carrying ``values``."""
    keep = sp.diags((~fixed.ravel()).astype(float))
    ident = sp.diags(fixed.ravel().astype(float))
    M = (keep @ L + ident).tocsr()
    b = np.where(fixed.ravel(), values.ravel(), rhs.ravel())
    return M, b


def solve_linear(M: sp.spmatrix, rhs: np.ndarray, tol: float = 1e-10, maxiter: int = 2000,
                 method: str = "auto"):
    """Direct sparse LU up to DIRECT_LIMIT unknowns, else ILU-preconditioned GMRES.

    Returns ``(x, relative_residual, iterations, method, history)``.
    """
    n = M.shape[0]
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros(n), 0.0, 0, "trivial", [0.0]
    if method == "auto":
        method = "direct" if n <= DIRECT_LIMIT else "gmres"
    if method == "direct":
        try:
            x = spla.splu(M.tocsc()).solve(rhs)
        except RuntimeError as exc:
            raise SolverError(f"singular system: {exc}") from exc
        res = np.linalg.norm(M @ x - rhs) / bnorm
        # one step of iterative refinement keeps ill-scaled rows honest
        if res > tol:
            x = x + spla.splu(M.tocsc()).solve(rhs - M @ x)
            res = np.linalg.norm(M @ x - rhs) / bnorm
        return x, res, 1, "direct", [res]
    history = []
    ilu = spla.spilu(M.tocsc(), drop_tol=1e-5, fill_factor=20)
    pre = spla.LinearOperator(M.shape, ilu.solve)
    x, info = spla.gmres(M, rhs, rtol=tol, restart=50, maxiter=maxiter, M=pre,
                         callback=lambda r: history.append(float(r)), callback_type="pr_norm")
    res = np.linalg.norm(M @ x - rhs) / bnorm
    if info != 0 or res > tol * 10:
        raise SolverError(f"GMRES did not converge (info={info}, residual={res:.3e}); history tail {history[-5:]}")
    return x, res, len(history), "gmres", history


def solve_resolvent(problem: EllipticProblem, tol: float = 1e-10) -> EllipticSolution:
    grid = problem.grid
    d = grid.dim
    L = assemble_nondivergence(grid, problem.A, problem.beta, None, problem.drift, problem.cross)
    L = (L - problem.lam * sp.identity(grid.size, format="csr")).tocsr()
    f = nodal(problem.f, grid, ())
    fixed = grid.boundary_mask()
    bvals = nodal(problem.boundary, grid, ())
    if problem.lam == 0 and not fixed.any():
        raise SolverError("operator singular: lambda = 0 with no Dirichlet rows")
    M, rhs = _dirichlet_system(grid, L, f, fixed, bvals)
    x, res, its, method, hist = solve_linear(M, rhs, tol)
    if res > tol:
        raise SolverError(f"relative residual {res:.3e} above tolerance {tol:.1e}")
    u = x.reshape(grid.shape)
    log.debug("resolvent d=%d lam=%g residual=%.2e via %s", d, problem.lam, res, method)
    return EllipticSolution(grid, u, res, its, method, residual_history=hist)


def solve_dirichlet_renormalizer(grid: Grid, Q, h, g, gamma: float, center, radius: float,
                                 tol: float = 1e-10, max_doublings: int = 10,
                                 drift: str = "fitted") -> tuple:
    """Positive solution of L u + (g - gamma) u = 0 in B(center, radius), u = 1 outside.

    ``gamma`` doubles until the computed ``u`` is positive, at most
    ``2**max_doublings`` times the starting value.  Returns
    ``(solution, final_gamma)``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    gv = nodal(g, grid, ())
    dist = grid.distance_from(center)
    fixed = (dist >= radius) | grid.boundary_mask()
    base = assemble_nondivergence(grid, Q, h, gv, drift)
    ones = np.ones(grid.shape)
    g0 = gamma
    for _ in range(max_doublings + 1):
        L = (base - gamma * sp.identity(grid.size, format="csr")).tocsr()
        M, rhs = _dirichlet_system(grid, L, np.zeros(grid.shape), fixed, ones)
        x, res, its, method, hist = solve_linear(M, rhs, tol)
        u = x.reshape(grid.shape)
        if u.min() > 0 and res <= tol:
            return EllipticSolution(grid, u, res, its, method, residual_history=hist), gamma
        gamma *= 2.0
    raise SolverError(f"no positive renormalizer up to gamma = {gamma / 2:g} (start {g0:g})")
