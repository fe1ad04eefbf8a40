import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kolmogorov.diagnostics import (NOT_ESTABLISHED, WITNESSED, DiagnosticError, dissipativity_check,
                                    exp_integrability_probe, harnack_ratio, lq_growth, lq_norms, lyapunov_check,
                                    mollification_stability, split_drift_check, uniqueness_conditions)
from kolmogorov.fields import CallableField, ConstantField, Grid, identity_field, matrix_field, scalar_field, vector_field
from kolmogorov.fpsolver import StationaryProblem, solve_stationary
from kolmogorov.moduli import ModulusCurve

G1 = Grid((-6.0,), (6.0,), (1201,))
# even node count on [-1.005, 1.005]: exactly 100 nodes of spacing 0.01 in B(0, 0.5)
UNIT = Grid((-1.005,), (1.005,), (202,))


def gauss(grid):
    x = grid.points()[..., 0]
    return np.exp(-x**2 / 2) / math.sqrt(2 * math.pi)


def ou(dim):
    return vector_field([f"-x{i + 1}" for i in range(dim)], dim)


V_QUAD = {1: scalar_field("x1^2 / 2", 1), 2: scalar_field("(x1^2 + x2^2) / 2", 2)}


# --- Harnack -----------------------------------------------------------------------

def test_harnack_constant():
    rep = harnack_ratio(np.full(G1.shape, 0.3), (0.0,), 0.5, G1)
    assert rep.ratio == 1.0 and rep.nodes == 101


def test_harnack_gaussian():
    assert harnack_ratio(gauss(G1), (0.0,), 0.5, G1).ratio == pytest.approx(math.exp(0.125), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-6, 1e6))
def test_harnack_homogeneity(alpha):
    rho = gauss(G1)
    assert harnack_ratio(alpha * rho, (0.3,), 1.0, G1).ratio == pytest.approx(
        harnack_ratio(rho, (0.3,), 1.0, G1).ratio, rel=1e-14)


def test_harnack_errors():
    with pytest.raises(DiagnosticError):
        harnack_ratio(gauss(G1), (5.5,), 1.0, G1)
    rho = gauss(G1)
    rho[600] = 0.0
    with pytest.raises(DiagnosticError):
        harnack_ratio(rho, (0.0,), 0.5, G1)


def test_harnack_accepts_solution():
    sol = solve_stationary(StationaryProblem(G1, identity_field(1), ou(1)))
    assert harnack_ratio(sol, (0.0,), 0.5).ratio == pytest.approx(math.exp(0.125), rel=1e-3)


# --- L^q growth ------------------------------------------------------------------------

def test_lq_max_norm_limit():
    rho = gauss(G1)
    rep = lq_growth(rho, (0.0,), 1.0, grid=G1)
    assert len(rep.q) == 12 and rep.q[-1] == 4096
    assert abs(rep.log_norms[-1] - math.log(rho.max())) <= 1e-3


def test_lq_constant_on_unit_ball():
    rep = lq_growth(np.full(UNIT.shape, 0.7), (0.0,), 0.5, grid=UNIT)
    np.testing.assert_allclose(rep.log_norms, math.log(0.7), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 60.0))
def test_lq_rescaling_matches_direct(seed, q):
    v = np.random.default_rng(seed).uniform(0.0, 3.0, size=200)
    direct = math.log(np.sum(v**q) * 0.01) / q
    assert lq_norms(v, 0.01, [q])[0] == pytest.approx(direct, rel=1e-12, abs=1e-13)


def test_lq_no_overflow_at_large_q():
    v = np.array([50.0, 49.0, 1.0])
    out = lq_norms(v, 1.0, [4096.0])
    assert np.isfinite(out[0]) and out[0] == pytest.approx(math.log(50.0), abs=1e-3)


def test_lq_dini_power_modulus_witnessed():
    r = np.logspace(-8, 1, 37)
    rep = lq_growth(gauss(G1), (0.0,), 1.0, omega=ModulusCurve(r, r**0.5), grid=G1)
    assert rep.verdict == WITNESSED and rep.delta <= 1.0
    # Lambda stays below its limit 1/alpha = 2
    assert max(rep.lambda_cq) <= 2.0


def test_lq_rejects_negative():
    rho = gauss(G1) - 0.3
    with pytest.raises(DiagnosticError):
        lq_growth(rho, (0.0,), 1.0, grid=G1)


# --- exponential integrability ----------------------------------------------------------------

def test_exp_probe_constant():
    rep = exp_integrability_probe(np.ones(UNIT.shape), (0.0,), 0.5, 1.0, 1.0, grid=UNIT)
    assert rep.value == pytest.approx(math.e, rel=1e-12)


@pytest.mark.parametrize("gamma1", [1.0, 1e2, 1e4, 1e6])
def test_exp_probe_gaussian_finite(gamma1):
    rep = exp_integrability_probe(gauss(G1), (0.0,), 1.0, gamma1, 1.0, grid=G1)
    assert rep.finite and math.isfinite(rep.log_value)


def test_exp_probe_log_threshold():
    # rho + 1 = exp(sqrt(|ln|x||)) turns the beta = 1/2 probe into |x|^{-gamma}:
    # integrable on B(0, 1) exactly when gamma < 1, with value 2 / (1 - gamma)
    def run(n, gamma):
        g = Grid((-1.0,), (1.0,), (n,))
        x = np.abs(g.points()[..., 0])
        rho = np.expm1(np.sqrt(np.abs(np.log(x))))
        return exp_integrability_probe(rho, (0.0,), 1.0, gamma, kind="log", beta=0.5, grid=g).value

    below = [run(n, 0.5) for n in (2000, 20000, 200000)]
    assert abs(below[-1] - 4.0) <= 0.01
    assert abs(below[2] - below[1]) < abs(below[1] - below[0])
    above = [run(n, 1.5) for n in (2000, 20000, 200000)]
    # divergent case grows like h^{-1/2}: a factor sqrt(10) per decade
    assert all(b / a > 2.5 for a, b in zip(above, above[1:]))


def test_exp_probe_rejects_bad_parameters():
    with pytest.raises(DiagnosticError):
        exp_integrability_probe(gauss(G1), (0.0,), 1.0, 0.0, grid=G1)
    with pytest.raises(DiagnosticError):
        exp_integrability_probe(gauss(G1), (0.0,), 1.0, 1.0, kind="log", beta=1.0, grid=G1)


# --- Lyapunov ------------------------------------------------------------------------------------

RADII = [1.0, 2.0, 3.0, 4.0, 5.0]


def test_lyapunov_ou_closed_form():
    rep = lyapunov_check(identity_field(2), ou(2), V_QUAD[2], RADII)
    np.testing.assert_allclose(rep.max_LV, [2 - r * r for r in RADII], atol=1e-9)
    assert rep.C[2] == pytest.approx(7.0, abs=1e-9)
    np.testing.assert_allclose(rep.C, [r * r - 2 for r in RADII], atol=1e-9)
    assert rep.working_radius == 2.0 and rep.verdict == WITNESSED


def test_lyapunov_exact_derivatives():
    rep = lyapunov_check(identity_field(2), ou(2), V_QUAD[2], RADII, grad=lambda x: x,
                         hess=lambda x: np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)))
    np.testing.assert_allclose(rep.C, [r * r - 2 for r in RADII], atol=1e-12)


def test_lyapunov_no_drift_fails():
    rep = lyapunov_check(identity_field(2), ConstantField(np.zeros(2), 2), V_QUAD[2], RADII)
    assert rep.working_radius is None and rep.verdict == NOT_ESTABLISHED


def test_lyapunov_linear_growth_fit_feasible():
    rep = lyapunov_check(identity_field(2), ou(2), V_QUAD[2], RADII)
    assert rep.linear_growth == WITNESSED and rep.C1 >= 0 and rep.C2 >= 0
    r = np.array(RADII)
    assert np.all(2 - r**2 <= rep.C1 + rep.C2 * r**2 / 2 + 1e-9)


def test_lyapunov_rejects_unsorted_radii():
    with pytest.raises(DiagnosticError):
        lyapunov_check(identity_field(2), ou(2), V_QUAD[2], [2.0, 1.0])


# --- dissipativity and split drift -----------------------------------------------------------------

def test_dissipativity_signs():
    rep = dissipativity_check(ou(2), RADII)
    np.testing.assert_allclose(rep.max_inner, [-r * r for r in RADII], rtol=1e-12)
    assert rep.verdict == WITNESSED
    assert dissipativity_check(vector_field(["x1", "x2"], 2), RADII).verdict == NOT_ESTABLISHED


def test_dissipativity_split_case():
    b = vector_field(["-x1*sqrt(x1^2 + x2^2) + 3*sin(x2)", "-x2*sqrt(x1^2 + x2^2) + 3"], 2)
    rep = dissipativity_check(b, RADII)
    r = np.array(RADII)
    assert np.all(np.array(rep.max_inner) <= -r**3 + r * math.hypot(3, 3) + 1e-9)
    assert rep.verdict == WITNESSED


def test_split_drift_linear_b1():
    g = Grid((-4.0, -4.0), (4.0, 4.0), (81, 81))
    b2 = vector_field(["exp(-x1^2 - x2^2)", "0"], 2)
    rep = split_drift_check(ou(2), b2, 1.0, 3.0, g)
    assert rep.C2 == pytest.approx(1.0, rel=1e-12)
    assert rep.C3 <= 1.0
    assert rep.verdict == WITNESSED


def test_split_drift_power_tail_lp():
    # |b2| = (1 + |x|)^{-1}, p = 3 in 2-D: ||b2||_3^3 = 2 pi int r (1 + r)^{-3} dr = pi
    g = Grid((-20.0, -20.0), (20.0, 20.0), (401, 401))
    b2 = CallableField(lambda x: np.stack([1 / (1 + np.linalg.norm(x, axis=-1)), 0 * x[..., 0]], -1), (2,), 2)
    rep = split_drift_check(ou(2), b2, 1.0, 3.0, g)
    assert rep.conditions["b2_in_Lp"] and rep.verdict == WITNESSED
    assert rep.lp_norm == pytest.approx(math.pi ** (1 / 3), rel=0.02)


def test_split_drift_preconditions():
    g = Grid((-1.0, -1.0), (1.0, 1.0), (11, 11))
    with pytest.raises(DiagnosticError):
        split_drift_check(ou(2), ou(2), 1.0, 2.0, g)


# --- mollification ladder --------------------------------------------------------------------------

def test_mollification_constant_is_noop():
    g = Grid((-1.25, -1.25), (1.25, 1.25), (161, 161))
    rep = mollification_stability(ConstantField(np.diag([1.0, 2.0]), 2), ConstantField(np.zeros(2), 2), g)
    assert rep.l1_differences == [0.0, 0.0, 0.0]
    assert rep.harnack_ok


def test_mollification_smooth_converges():
    g = Grid((-4.0,), (4.0,), (801,))
    rep = mollification_stability(matrix_field([["1 + 0.3*sin(x1)"]], 1), ou(1), g, radius=1.0)
    assert all(d <= 1e-3 for d in rep.l1_differences[1:])
    assert rep.differences_decreasing and rep.harnack_ok


def test_mollification_rejects_bad_ladder():
    g = Grid((-2.0,), (2.0,), (41,))
    with pytest.raises(DiagnosticError):
        mollification_stability(identity_field(1), ou(1), g, (4, 2))


# --- uniqueness ------------------------------------------------------------------------------------

def test_uniqueness_bounded_coefficients():
    g = Grid((-2.0, -2.0), (2.0, 2.0), (41, 41))
    rho = np.full(g.shape, 1 / 16)
    rep = uniqueness_conditions(matrix_field([["2 + sin(x1)", "0"], ["0", "1"]], 2),
                                vector_field(["cos(x2)", "1"], 2), rho, g)
    assert rep.condition_i == WITNESSED and rep.verdict == WITNESSED
    assert math.isfinite(rep.integral_a) and math.isfinite(rep.integral_b)


def test_uniqueness_ou_lyapunov():
    sol = solve_stationary(StationaryProblem(G1, identity_field(1), ou(1)))
    rep = uniqueness_conditions(identity_field(1), ou(1), sol, V=V_QUAD[1], radii=RADII)
    assert rep.condition_ii == WITNESSED
    C1, C2 = rep.lyapunov["C1"], rep.lyapunov["C2"]
    r = np.array(RADII)
    assert np.all(1 - r**2 <= C1 + C2 * r**2 / 2 + 1e-9)


def test_uniqueness_cubic_drift():
    b = vector_field(["-x1^3"], 1)
    g = Grid((-3.0,), (3.0,), (301,))
    rho = np.exp(-g.points()[..., 0] ** 4 / 4)
    rho /= g.integrate(rho)
    rep = uniqueness_conditions(identity_field(1), b, rho, g, V=V_QUAD[1], radii=[0.5, 1.0, 1.5, 2.0, 2.5])
    assert rep.condition_ii == WITNESSED
    r = np.array([0.5, 1.0, 1.5, 2.0, 2.5])
    assert np.all(1 - r**4 <= rep.lyapunov["C1"] + rep.lyapunov["C2"] * r**2 / 2 + 1e-8)
