"""Coefficients and densities carried through a :class:`ZvonkinMap`.

With J = Phi' = I + u' and Psi = Phi^{-1}:

    Q(y) = J A J^T  at Psi(y)
    h(y) = lam u(Psi(y)) + J b1  at Psi(y)      (b1 = 0 unless the drift is split)
    sigma(y) = rho(Psi(y)) / |det J(Psi(y))|

The map built on a box vanishes on the box boundary, so it sends the box onto
itself and every pushed field is sampled on the source grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .fields import (CallableField, Field, FieldError, Grid, SampledField, identity_field,
                     sample, scalar_field, sym_eigvalsh)
from .resolvent import EllipticSolution, nodal
from .zvonkin import ZvonkinMap


@dataclass
class TransformedProblem:
    grid: Grid
    Q: SampledField
    h: SampledField
    zmap: ZvonkinMap
    bounds: tuple
    g: Optional[SampledField] = None
    center: tuple = None
    radius: float = None


def _source_points(zmap: ZvonkinMap, grid: Grid) -> np.ndarray:
    return zmap.inverse(grid.points())


def pushforward_coefficients(zmap: ZvonkinMap, A: Field, b1: Field | None = None,
                             c: Field | None = None, grid: Grid | None = None,
                             ball=None) -> TransformedProblem:
    grid = grid or zmap.grid
    x = _source_points(zmap, grid)
    J = zmap.jacobian(x)
    Ax = np.asarray(A(x), float)
    Q = J @ Ax @ np.swapaxes(J, -1, -2)
    Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))
    h = zmap.lam * zmap.displacement(x)
    if b1 is not None:
        h = h + np.einsum("...ki,...i->...k", J, np.asarray(b1(x), float))
    ev = sym_eigvalsh(Q)
    g = SampledField(grid, np.asarray(c(x), float)) if c is not None else None
    center = radius = None
    if ball is not None:
        center = tuple(zmap.forward(np.array(ball.center))[..., :].ravel())
        radius = 2 * ball.radius
    return TransformedProblem(grid, SampledField(grid, Q), SampledField(grid, h), zmap,
                              (float(ev[..., 0].min()), float(ev[..., -1].max())), g, center, radius)


def _values(rho, grid: Grid, order: int = 1) -> Callable:
    """Evaluator for a density given as a field or as nodal values on ``grid``.

    Nodal values are resampled multilinearly (``order=1``) or with a cubic
    spline clipped at zero (``order=3``); both keep densities nonnegative.
    """
    if isinstance(rho, Field):
        return rho
    values = np.asarray(rho, float).reshape(grid.shape)
    if order == 1:
        return SampledField(grid, values)
    if order != 3:
        raise ValueError(f"interpolation order must be 1 or 3, got {order}")
    coeffs = ndimage.spline_filter(values, order=3, mode="nearest")
    lo, h = np.array(grid.lo), grid.h
    hi = np.array(grid.shape) - 1.0

    def evaluate(x):
        idx = np.clip((np.asarray(x, float) - lo) / h, 0.0, hi)
        coords = np.moveaxis(idx, -1, 0).reshape(grid.dim, -1)
        out = ndimage.map_coordinates(coeffs, coords, order=3, mode="nearest", prefilter=False)
        return np.maximum(out, 0.0).reshape(idx.shape[:-1])
    return evaluate


def pull_density(zmap: ZvonkinMap, rho, grid: Grid | None = None, order: int = 3) -> SampledField:
    """sigma(y) = |det Psi'(y)| rho(Psi(y)), with det Psi' = 1/det Phi'(Psi(y))."""
    grid = grid or zmap.grid
    rho = _values(rho, zmap.grid, order)
    x = _source_points(zmap, grid)
    det = np.linalg.det(zmap.jacobian(x))
    if np.any(det <= 0):
        raise FieldError("Jacobian determinant not positive")
    return SampledField(grid, np.asarray(rho(x), float) / det)


def push_density(zmap: ZvonkinMap, sigma, grid: Grid | None = None, order: int = 3) -> SampledField:
    """rho(x) = sigma(Phi(x)) |det Phi'(x)|."""
    grid = grid or zmap.grid
    sigma = _values(sigma.values if isinstance(sigma, SampledField) and sigma.grid == zmap.grid else sigma,
                    zmap.grid, order)
    x = grid.points()
    y = np.clip(zmap.forward(x), np.array(zmap.grid.lo), np.array(zmap.grid.hi))
    det = np.linalg.det(zmap.jacobian(x))
    if np.any(det <= 0):
        raise FieldError("Jacobian determinant not positive")
    return SampledField(grid, np.asarray(sigma(y), float) * np.abs(det))


# --- dimension lifts ------------------------------------------------------

def lift_potential(A: Field, b: Field, c) -> tuple:
    """(d+1)-dimensional coefficients absorbing the zero-order term c.

    A+ = diag(A(x), 1) and b+ = (b(x), -c(x) y); the last coordinate is y.
    """
    d = A.dim
    c = scalar_field(c, d)

    def a_plus(z):
        x = z[..., :d]
        out = np.zeros(z.shape[:-1] + (d + 1, d + 1))
        out[..., :d, :d] = A(x)
        out[..., d, d] = 1.0
        return out

    def b_plus(z):
        x = z[..., :d]
        out = np.zeros(z.shape[:-1] + (d + 1,))
        out[..., :d] = b(x)
        out[..., d] = -c(x) * z[..., d]
        return out

    return CallableField(a_plus, (d + 1, d + 1), d + 1), CallableField(b_plus, (d + 1,), d + 1)


@dataclass
class DriftKillingLift:
    A: CallableField
    M: float
    suggested_M: float
    min_eigenvalue: float
    positive_definite: bool

    def report(self) -> dict:
        return {"M": self.M, "suggested_M": self.suggested_M,
                "min_eigenvalue": self.min_eigenvalue, "positive_definite": self.positive_definite}


def lift_kill_drift(A: Field, b: Field, M: float, grid: Grid, y_nodes: int | None = None) -> DriftKillingLift:
    """Drift-free (d+1)-dimensional matrix on the strip y in (0, 1).

    Off-diagonal column is -(2 + y/2) b(x), corner M.  With this sign a
    y-independent rho solves the lifted equation exactly when it solves the
    original one.  ``suggested_M`` is the Schur-complement bound
    6.25 * sup <A^{-1} b, b>.  ``positive_definite`` comes from an
    eigenvalue sweep over grid x strip nodes.
    """
    if M <= 0:
        raise ValueError("M must be positive")
    d = A.dim
    a = nodal(A, grid, (d, d))
    bv = nodal(b, grid, (d,))
    if not np.all(np.isfinite(bv)):
        raise FieldError("drift must be bounded on the grid")
    quad = np.einsum("...i,...i->...", np.linalg.solve(a, bv[..., None])[..., 0], bv)
    suggested = 6.25 * float(quad.max())

    def a_tilde(z):
        x = z[..., :d]
        y = z[..., d]
        out = np.zeros(z.shape[:-1] + (d + 1, d + 1))
        out[..., :d, :d] = A(x)
        col = -(2.0 + y / 2.0)[..., None] * b(x)
        out[..., :d, d] = col
        out[..., d, :d] = col
        out[..., d, d] = M
        return out

    field = CallableField(a_tilde, (d + 1, d + 1), d + 1)
    ny = y_nodes or max(3, int(round(1.0 / grid.h.min())) + 1)
    ys = np.linspace(0.0, 1.0, ny)
    pts = grid.points().reshape(-1, d)
    zs = np.concatenate([np.repeat(pts, ny, axis=0), np.tile(ys, len(pts))[:, None]], axis=1)
    ev = np.linalg.eigvalsh(field(zs))[:, 0] if d + 1 > 2 else sym_eigvalsh(field(zs))[:, 0]
    lam_min = float(ev.min())
    return DriftKillingLift(field, M, suggested, lam_min, lam_min > 0)


# --- renormalisation ------------------------------------------------------

@dataclass
class HTransform:
    drift: SampledField
    gamma: float
    u: np.ndarray

    def density(self, sigma: np.ndarray) -> np.ndarray:
        """sigma -> u sigma."""
        return self.u * np.asarray(sigma, float)


def h_transform(Q, h, g, gamma: float, renormalizer: EllipticSolution, floor: float = 1e-12) -> HTransform:
    """New drift h + 2 u^{-1} Q grad u; the zero-order term becomes gamma.

    ``g`` only documents the coefficient being replaced: the renormalizer
    already solved L u + (g - gamma) u = 0.
    """
    grid = renormalizer.grid
    d = grid.dim
    u = renormalizer.u
    if u.min() <= floor:
        raise FieldError(f"renormalizer not positive (min {u.min():.3e})")
    q = nodal(Q, grid, (d, d))
    hv = nodal(h, grid, (d,))
    grad = renormalizer.gradient
    new = hv + 2.0 * np.einsum("...ij,...j->...i", q, grad) / u[..., None]
    return HTransform(SampledField(grid, new), gamma, u)
