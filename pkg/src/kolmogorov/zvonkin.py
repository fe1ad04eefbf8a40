"""The change of coordinates Phi(x) = x + u(x) that smooths a rough drift.

Each component u^k solves the resolvent equation

    tr(A D^2 u^k) + <beta, grad u^k> - lam u^k = -beta^k

on the grid box with zero Dirichlet data, where ``beta`` is the drift cut
off outside B(x0, 4R).  ``lam`` doubles from ``lam0`` until the grid-sup of
the spectral norm of u' drops to ``delta``; then Phi is bi-Lipschitz with
constants 1/2 and 2 and its inverse is the fixed point of
psi -> y - u(psi).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import (Ball, Field, FieldError, Grid, extend_drift_zero, grid_gradient,
                     interpolate, sample, sym_eigvalsh)
from .resolvent import SolverError, _dirichlet_system, assemble_nondivergence, nodal

log = logging.getLogger(__name__)


class ZvonkinError(RuntimeError):
    pass


def spectral_norm(M: np.ndarray) -> np.ndarray:
    """Spectral norm of stacked square matrices via eigenvalues of M^T M."""
    MtM = np.swapaxes(M, -1, -2) @ M
    MtM = 0.5 * (MtM + np.swapaxes(MtM, -1, -2))
    return np.sqrt(np.maximum(sym_eigvalsh(MtM)[..., -1], 0.0))


@dataclass
class ZvonkinMap:
    grid: Grid
    u: np.ndarray                 # grid.shape + (d,)
    lam: float = 0.0
    delta: float = 0.5
    du: np.ndarray = None         # grid.shape + (d, d), du[..., k, i] = d_i u^k
    lambda_schedule: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    margin: float = 0.0

    def __post_init__(self):
        d = self.grid.dim
        self.u = np.asarray(self.u, float).reshape(self.grid.shape + (d,))
        if self.du is None:
            self.du = grid_gradient(self.grid, self.u)

    @classmethod
    def from_displacement(cls, grid: Grid, u, **kw) -> "ZvonkinMap":
        """Map from explicit node values of u (tests, transported maps)."""
        u = np.broadcast_to(np.asarray(u, float), grid.shape + (grid.dim,)).copy()
        return cls(grid, u, **kw)

    @property
    def dim(self) -> int:
        return self.grid.dim

    # diagnostics
    @property
    def sup_grad(self) -> list:
        """Grid-sup of |grad u^k| for each component k."""
        return [float(np.max(np.linalg.norm(self.du[..., k, :], axis=-1))) for k in range(self.dim)]

    @property
    def op_norm_sup(self) -> float:
        return float(np.max(spectral_norm(self.du)))

    @property
    def det_range(self) -> tuple:
        det = np.linalg.det(np.eye(self.dim) + self.du)
        return float(det.min()), float(det.max())

    @property
    def max_displacement(self) -> float:
        return float(np.max(np.linalg.norm(self.u, axis=-1)))

    def report(self) -> dict:
        lo, hi = self.det_range
        return {
            "lambda": self.lam,
            "delta": self.delta,
            "sup_grad": self.sup_grad,
            "op_norm_sup": self.op_norm_sup,
            "det_min": lo,
            "det_max": hi,
            "lambda_schedule": list(self.lambda_schedule),
            "residuals": list(self.residuals),
            "max_displacement": self.max_displacement,
            "margin": self.margin,
        }

    # evaluation
    def _points(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        return x

    def displacement(self, x, outside: str = "raise") -> np.ndarray:
        return interpolate(self.grid, self.u, self._points(x), outside=outside)

    def forward(self, x) -> np.ndarray:
        x = self._points(x)
        if not np.all(self.grid.contains(x)):
            raise ZvonkinError("forward: point outside grid box")
        return x + interpolate(self.grid, self.u, x)

    def jacobian(self, x) -> np.ndarray:
        """I + u'(x) with u' interpolated from node differences."""
        x = self._points(x)
        if not np.all(self.grid.contains(x)):
            raise ZvonkinError("jacobian: point outside grid box")
        return np.eye(self.dim) + interpolate(self.grid, self.du, x)

    def inverse(self, y, tol: float = 1e-12, max_iter: int = 100, return_iterations: bool = False):
        """Solve x + u(x) = y by the contraction psi <- y - u(psi).

        u is extended by zero outside the box; iterates straying further
        than the largest displacement from the box are an error.
        """
        y = self._points(y)
        if not np.all(self.grid.contains(y)):
            raise ZvonkinError("inverse: point outside grid box")
        lo = np.array(self.grid.lo)
        hi = np.array(self.grid.hi)
        slack = self.max_displacement + 1e-12
        psi = y.copy()
        its = 0
        for its in range(1, max_iter + 1):
            nxt = y - interpolate(self.grid, self.u, psi, outside="zero")
            if np.any(nxt < lo - slack) or np.any(nxt > hi + slack):
                raise ZvonkinError("inverse: iterate left the grid box (point too close to image boundary)")
            step = np.max(np.abs(nxt - psi), initial=0.0)
            psi = nxt
            if step < tol:
                break
        else:
            raise ZvonkinError(f"inverse: no convergence in {max_iter} iterations (last step {step:.2e})")
        err = np.max(np.linalg.norm(psi + interpolate(self.grid, self.u, psi, outside="zero") - y, axis=-1),
                     initial=0.0)
        if err > 1e-10:
            raise ZvonkinError(f"inverse: round-trip error {err:.2e}")
        return (psi, its) if return_iterations else psi


def build_zvonkin(A: Field, b: Field, ball: Ball, grid: Grid, delta: float = 0.2,
                  lam0: float = 1.0, lam_cap: float = 2.0**30, tol: float = 1e-10,
                  drift: str = "fitted") -> ZvonkinMap:
    """Double lambda from ``lam0`` until grid-sup ||u'|| <= delta."""
    if not 0 < delta <= 0.5:
        raise ValueError(f"delta must lie in (0, 1/2], got {delta}")
    if not ball.fits_in(grid):
        raise FieldError("B(x0, 4R) must lie inside the grid box")
    d = grid.dim
    a = nodal(A, grid, (d, d))
    if sym_eigvalsh(a)[..., 0].min() <= 0:
        raise FieldError("diffusion matrix not positive definite on the grid")
    beta = sample(extend_drift_zero(b, ball), grid).reshape(grid.shape + (d,))
    margin = float(min(np.min(np.array(ball.center) - 4 * ball.radius - np.array(grid.lo)),
                       np.min(np.array(grid.hi) - np.array(ball.center) - 4 * ball.radius)))
    if margin < 2 * ball.radius:
        log.warning("box margin %.3g around B(x0,4R) is below 2R = %.3g", margin, 2 * ball.radius)

    base = assemble_nondivergence(grid, a, beta, None, drift)
    fixed = grid.boundary_mask()
    zeros = np.zeros(grid.shape)
    schedule, lam = [], lam0
    if not np.any(beta):
        return ZvonkinMap(grid, np.zeros(grid.shape + (d,)), lam0, delta,
                          lambda_schedule=[lam0], residuals=[0.0] * d, margin=margin)
    while lam <= lam_cap:
        schedule.append(lam)
        L = (base - lam * sp.identity(grid.size, format="csr")).tocsr()
        M, _ = _dirichlet_system(grid, L, zeros, fixed, zeros)
        try:
            lu = spla.splu(M.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"resolvent factorisation failed at lambda={lam}: {exc}") from exc
        u = np.empty(grid.shape + (d,))
        residuals = []
        for k in range(d):
            rhs = np.where(fixed, 0.0, -beta[..., k]).ravel()
            x = lu.solve(rhs)
            r = np.linalg.norm(M @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
            if r > tol:
                x = x + lu.solve(rhs - M @ x)
                r = np.linalg.norm(M @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
            if r > tol:
                raise SolverError(f"resolvent residual {r:.2e} above {tol:.1e} at lambda={lam}")
            residuals.append(float(r))
            u[..., k] = x.reshape(grid.shape)
        zmap = ZvonkinMap(grid, u, lam, delta, lambda_schedule=list(schedule),
                          residuals=residuals, margin=margin)
        norm = zmap.op_norm_sup
        log.info("zvonkin lambda=%g sup||u'||=%.4f", lam, norm)
        if norm <= delta:
            return zmap
        lam *= 2.0
    raise ZvonkinError(f"lambda cap {lam_cap:g} reached; last sup||u'|| = {norm:.4f}")
