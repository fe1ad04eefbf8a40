import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from kolmogorov.fields import CallableField, ConstantField, Grid, GridArray, identity_field, vector_field
from kolmogorov.fpsolver import StationaryProblem, solve_stationary
from kolmogorov.sde import (SDEConfig, SDEError, box_muller, compare_densities, diffusion_sqrt, euler_maruyama,
                            philox_stream, superposition_condition)

OU_B = CallableField(lambda x: -x, (1,), 1)


def gaussian_1d(grid):
    x = grid.points()[..., 0]
    return np.exp(-x**2 / 2) / math.sqrt(2 * math.pi)


# --- diffusion square root ------------------------------------------------------------

def test_diffusion_sqrt_examples():
    np.testing.assert_allclose(diffusion_sqrt(np.eye(2)), math.sqrt(2) * np.eye(2), atol=1e-15)
    np.testing.assert_allclose(diffusion_sqrt(np.diag([2.0, 0.5])), np.diag([2.0, 1.0]), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_diffusion_sqrt_reconstruction(seed, d):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(50, d, d))
    A = B @ np.swapaxes(B, -1, -2) + 0.1 * np.eye(d)
    L = diffusion_sqrt(A)
    assert np.all(np.triu(L, 1) == 0)
    err = np.linalg.norm(L @ np.swapaxes(L, -1, -2) - 2 * A, ord=2, axis=(-2, -1))
    assert np.all(err <= 1e-12 * np.maximum(1.0, np.linalg.norm(2 * A, ord=2, axis=(-2, -1))))


def test_diffusion_sqrt_reports_pivot():
    with pytest.raises(ValueError, match="pivot 1"):
        diffusion_sqrt(np.array([[1.0, 2.0], [2.0, 1.0]]))


# --- random numbers -----------------------------------------------------------------------

def test_box_muller_moments_and_streams():
    z = box_muller(philox_stream(7, 0), 200_000)
    assert abs(z.mean()) < 0.01 and abs(z.var() - 1) < 0.01
    again = box_muller(philox_stream(7, 0), 200_000)
    np.testing.assert_array_equal(z, again)
    other = box_muller(philox_stream(7, 1), 1000)
    assert not np.array_equal(other, z[:1000])


# --- Euler-Maruyama ------------------------------------------------------------------------------

def test_reflecting_box_uniform():
    g = Grid((0.0,), (1.0,), (21,))
    cfg = SDEConfig(identity_field(1), ConstantField(np.zeros(1), 1), g, dt=1e-4, T=1001.0, burn_in=1.0, seed=3)
    est = euler_maruyama(cfg)
    assert est.samples >= 10**7
    l1, _ = compare_densities(est.density, np.ones(g.shape), g)
    assert l1 <= 0.05
    assert abs(g.integrate(est.density) - 1.0) <= 1e-12
    assert np.all(est.density >= 0)


@pytest.fixture(scope="module")
def ou_run():
    g = Grid((-6.0,), (6.0,), (1201,))
    cfg = SDEConfig(identity_field(1), OU_B, g, dt=1e-3, T=2000.0, burn_in=100.0, seed=20240611)
    return euler_maruyama(cfg)


def test_ou_occupation_matches_gaussian(ou_run):
    l1, _ = compare_densities(ou_run.density, gaussian_1d(ou_run.grid), ou_run.grid)
    assert l1 <= 0.05
    assert ou_run.stderr.shape == ou_run.grid.shape and np.all(ou_run.stderr >= 0)


def test_triangle_budget(ou_run):
    g = ou_run.grid
    pde = solve_stationary(StationaryProblem(g, identity_field(1), OU_B))
    exact = gaussian_1d(g)
    occ_pde = compare_densities(ou_run.density, pde.rho, g)[0]
    occ_exact = compare_densities(ou_run.density, exact, g)[0]
    exact_pde = compare_densities(exact, pde.rho, g)[0]
    assert occ_pde <= occ_exact + exact_pde
    rep = ou_run.report(pde)
    assert rep["l1_vs_reference"] == pytest.approx(occ_pde)
    assert rep["seed"] == 20240611 and rep["samples"] == ou_run.samples


def test_determinism():
    g = Grid((-3.0, -3.0), (3.0, 3.0), (31, 31))
    cfg = SDEConfig(identity_field(2), vector_field(["-x1 + x2", "-x2 - x1"], 2), g, dt=0.01, T=50.0,
                    burn_in=1.0, n_traj=3, seed=99)
    a, b = euler_maruyama(cfg), euler_maruyama(cfg)
    np.testing.assert_array_equal(a.counts, b.counts)
    np.testing.assert_array_equal(a.density, b.density)
    c = euler_maruyama(SDEConfig(identity_field(2), vector_field(["-x1 + x2", "-x2 - x1"], 2), g, dt=0.01,
                                 T=50.0, burn_in=1.0, n_traj=3, seed=100))
    assert not np.array_equal(a.counts, c.counts)


def test_variance_bias_decreases_with_dt():
    # Euler-Maruyama for OU has stationary variance 2 / (2 - dt): bias dt / (2 - dt)
    g = Grid((-10.0,), (10.0,), (201,))
    biases = []
    for dt in (0.4, 0.2, 0.1, 0.05):
        est = euler_maruyama(SDEConfig(identity_field(1), OU_B, g, dt=dt, T=2e5, burn_in=20.0, seed=5))
        biases.append(abs(est.variance[0] - 1.0))
        assert est.variance[0] == pytest.approx(2 / (2 - dt), abs=0.015)
    assert all(b1 < b0 for b0, b1 in zip(biases, biases[1:]))


def test_divergence_detected():
    g = Grid((-1.0,), (1.0,), (21,))
    wild = CallableField(lambda x: 1e9 * np.sign(x), (1,), 1)
    with pytest.raises(SDEError):
        euler_maruyama(SDEConfig(identity_field(1), wild, g, dt=0.1, T=10.0, burn_in=1.0))


def test_config_validation():
    g = Grid((-1.0,), (1.0,), (21,))
    with pytest.raises(ValueError):
        SDEConfig(identity_field(1), OU_B, g, dt=0.0)
    with pytest.raises(ValueError):
        SDEConfig(identity_field(1), OU_B, g, T=1.0, burn_in=2.0)
    with pytest.raises(ValueError):
        SDEConfig(identity_field(1), OU_B, g, n_traj=0)


# --- comparisons ----------------------------------------------------------------------------------

def test_compare_examples():
    g = Grid((0.0,), (2.0,), (201,))
    p = gaussian_1d(g)
    assert compare_densities(p, p, g) == (0.0, 0.0)
    left = np.where(g.points()[..., 0] < 0.995, 1.0, 0.0)
    right = np.where(g.points()[..., 0] > 1.005, 1.0, 0.0)
    left /= g.integrate(left)
    right /= g.integrate(right)
    assert compare_densities(left, right, g)[0] == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ValueError):
        compare_densities(GridArray(g, p), GridArray(Grid((0.0,), (2.0,), (101,)), np.ones(101)))


def test_compare_one_cell_shift():
    h = 0.01
    g = Grid((-8.0,), (8.0,), (1601,))
    x = g.points()[..., 0]
    p = np.exp(-x**2 / 2) / math.sqrt(2 * math.pi)
    q = np.exp(-(x - h) ** 2 / 2) / math.sqrt(2 * math.pi)
    # exact: int |phi(x) - phi(x - h)| dx = 2 (Phi(h/2) - Phi(-h/2))
    exact = 2 * special.erf(h / (2 * math.sqrt(2)))
    l1, sup = compare_densities(p, q, g)
    assert l1 == pytest.approx(exact, rel=1e-4)
    assert l1 == pytest.approx(2 * h * 0.5 * 2 / math.sqrt(2 * math.pi), rel=1e-3)


# --- superposition integral -----------------------------------------------------------------

def test_superposition_uniform():
    g = Grid((-2.0, -2.0), (2.0, 2.0), (161, 161))
    rho = np.full(g.shape, 1.0 / 16.0)
    rep = superposition_condition(rho, identity_field(2), ConstantField(np.zeros(2), 2), g)
    oracle, _ = integrate.dblquad(lambda y, x: 1.0 / (1 + x * x + y * y) / 16.0, -2, 2, -2, 2, epsabs=1e-12)
    assert rep.value == pytest.approx(oracle, rel=1e-4)
    assert rep.drift_part == 0.0


def test_superposition_narrow_gaussian():
    g = Grid((-1.0, -1.0), (1.0, 1.0), (401, 401))
    x = g.points()
    s = 0.01
    rho = np.exp(-np.sum(x**2, axis=-1) / (2 * s * s)) / (2 * math.pi * s * s)
    rep = superposition_condition(rho, identity_field(2), ConstantField(np.zeros(2), 2), g)
    assert rep.value == pytest.approx(1.0, abs=1e-3)


def test_superposition_drift_linear():
    g = Grid((-3.0, -3.0), (3.0, 3.0), (61, 61))
    x = g.points()
    rho = np.exp(-np.sum(x**2, axis=-1) / 2) / (2 * math.pi)
    b = vector_field(["-x1 + sin(x2)", "-x2^3"], 2)
    b2 = vector_field(["2*(-x1 + sin(x2))", "2*(-x2^3)"], 2)
    r1 = superposition_condition(rho, identity_field(2), b, g)
    r2 = superposition_condition(rho, identity_field(2), b2, g)
    assert r2.drift_part == pytest.approx(2 * r1.drift_part, rel=1e-14)
    assert r2.diffusion_part == r1.diffusion_part
    assert 0 <= r1.tail <= r1.value
