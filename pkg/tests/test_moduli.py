import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kolmogorov.fields import (Ball, ConstantField, Grid, SampledField, identity_field, matrix_field, scalar_field,
                               vector_field)
from kolmogorov.moduli import (ModulusCurve, ModulusError, composition_constant, dini_integral,
                               dini_mean_oscillation, lambda_function, uniform_modulus, vmo_modulus)
from kolmogorov.zvonkin import build_zvonkin

G1 = Grid((-1.0,), (1.0,), (201,))
G2 = Grid((-1.0, -1.0), (1.0, 1.0), (41, 41))
RADII = np.array([0.05, 0.1, 0.2, 0.4])


def test_curve_validation():
    with pytest.raises(ModulusError):
        ModulusCurve([0.1, 0.05], [0.0, 0.0])
    with pytest.raises(ModulusError):
        ModulusCurve([0.1, 0.2], [0.2, 0.1], "uniform")
    with pytest.raises(ModulusError):
        ModulusCurve([0.1, 0.2], [-0.1, 0.1], "dmo")
    ModulusCurve([0.1, 0.2], [0.2, 0.1], "dmo")


# --- uniform modulus -------------------------------------------------------------

def test_uniform_constant_is_zero():
    assert np.all(uniform_modulus(ConstantField(3.0, 2), G2, RADII).values == 0)


def test_uniform_linear_1d():
    curve = uniform_modulus(scalar_field("x1"), G1, RADII)
    assert np.all(np.abs(curve.values - RADII) <= G1.h[0] + 1e-12)


def test_uniform_lipschitz_bound():
    f = scalar_field("sin(3*x1) + 0.5*cos(2*x2)", 2)
    L = math.hypot(3.0, 1.0)
    curve = uniform_modulus(f, G2, RADII)
    assert np.all(curve.values <= L * RADII + 1e-12)
    sampled = uniform_modulus(f, G2, RADII, center_samples=5)
    assert np.all(sampled.values <= curve.values + 1e-15)


def test_uniform_matrix_uses_spectral_norm():
    A = ConstantField(np.eye(2), 2)
    assert np.all(uniform_modulus(A, G2, RADII).values == 0)
    B = matrix_field([["x1", "0"], ["0", "-x1"]], 2)
    curve = uniform_modulus(B, G2, RADII)
    assert np.all(np.abs(curve.values - RADII) <= G2.h[0] + 1e-12)


def test_empty_radii_rejected():
    with pytest.raises(ModulusError):
        uniform_modulus(scalar_field("x1"), G1, [])


# --- Dini mean oscillation ------------------------------------------------------

def test_dmo_constant_and_linear():
    assert np.all(dini_mean_oscillation(ConstantField(2.0, 1), G1, RADII).values == 0)
    curve = dini_mean_oscillation(scalar_field("x1"), G1, RADII)
    assert np.all(np.abs(curve.values - RADII / 2) <= 2 * G1.h[0])


def test_dmo_below_resolution_rejected():
    with pytest.raises(ModulusError):
        dini_mean_oscillation(scalar_field("x1"), G1, [0.001, 0.1])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_dmo_bounded_by_uniform_at_twice_radius(seed):
    rng = np.random.default_rng(seed)
    k = rng.uniform(0.5, 6.0, size=2)
    p = rng.uniform(0.3, 1.0)
    f = scalar_field(f"sin({k[0]}*x1) * cos({k[1]}*x2) + abs(x1 - 0.1)^{p}", 2)
    w = dini_mean_oscillation(f, G2, RADII)
    u = uniform_modulus(f, G2, 2 * RADII)
    assert np.all(w.values <= u.values + 1e-10)


# --- VMO -------------------------------------------------------------------------

def test_vmo_constant_and_identity():
    assert np.all(vmo_modulus(ConstantField(np.diag([2.0, 1.0]), 2), G2, RADII).values == 0)
    assert np.all(vmo_modulus(identity_field(2), G2, RADII).values == 0)


def test_vmo_linear_double_average():
    A = matrix_field([["x1"]], 1)
    curve = vmo_modulus(A, G1, [1.0], centers=[0.0], pair_samples=20000, seed=11)
    assert curve.sampling["methods"] == ["monte_carlo"]
    sigma = curve.sampling["stderr"][0]
    assert abs(curve.values[0] - 2.0 / 3.0) <= 3 * sigma
    assert curve.sampling["scaled_values"][0] == pytest.approx(curve.values[0] * 4.0)


def test_vmo_quadrature_on_small_balls():
    A = matrix_field([["x1"]], 1)
    curve = vmo_modulus(A, G1, [0.05], centers=[0.0])
    # 11 nodes spaced h: exact discrete double average of |x - y|
    x = np.arange(-5, 6) * G1.h[0]
    assert curve.values[0] == pytest.approx(np.abs(x[:, None] - x[None, :]).mean(), rel=1e-12)


def test_vmo_requires_enough_pairs():
    with pytest.raises(ModulusError):
        vmo_modulus(identity_field(1), G1, RADII, pair_samples=10)


# --- Dini integral -------------------------------------------------------------------

DECADES = np.logspace(-6, 0, 7)


def test_dini_integral_identity():
    value, ok = dini_integral(ModulusCurve(DECADES, DECADES), 1.0)
    assert ok and abs(value - 1.0) <= 0.02


def test_dini_integral_zero():
    value, ok = dini_integral(ModulusCurve(DECADES, np.zeros_like(DECADES)), 1.0)
    assert ok and value == 0.0


def test_dini_integral_log_modulus_flagged():
    r = np.logspace(-8, -1, 8)
    value, ok = dini_integral(ModulusCurve(r, 1.0 / np.abs(np.log(r))), 0.1)
    assert not ok and math.isinf(value)


def test_dini_integral_needs_three_radii():
    with pytest.raises(ModulusError):
        dini_integral(ModulusCurve([0.1, 1.0], [0.1, 1.0]), 1.0)


# --- Lambda -------------------------------------------------------------------------------

def power_curve(alpha):
    r = np.logspace(-8, 1, 19)
    return ModulusCurve(r, r**alpha)


@pytest.mark.parametrize("alpha,expected", [(1.0, 1 - 2 / math.e), (0.5, 2 - 4 / math.e)])
def test_lambda_at_e(alpha, expected):
    rep = lambda_function(power_curve(alpha), math.e)
    assert rep.values[0] == pytest.approx(expected, rel=1e-6)


@pytest.mark.parametrize("alpha", [1.0, 0.5, 0.25])
def test_lambda_bounded_for_power_modulus(alpha):
    rep = lambda_function(power_curve(alpha), 1e6)
    assert rep.values[0] <= 1 / alpha + 1e-3
    closed = (1 - (1 + math.log(1e6)) / 1e6) / alpha
    assert rep.values[0] == pytest.approx(closed, rel=1e-6)


def test_lambda_monotone():
    r = np.logspace(-6, 0.5, 30)
    omega = ModulusCurve(r, r**0.7 * (1 + 0.3 * np.log1p(r)))
    t = np.linspace(1.0, 200.0, 60)
    assert np.all(np.diff(lambda_function(omega, t).values) >= -1e-14)


def test_lambda_rejects_bad_input():
    with pytest.raises(ModulusError):
        lambda_function(ModulusCurve([0.1, 0.2, 0.3], [0.1, 0.1, 0.2]), 2.0)
    with pytest.raises(ModulusError):
        lambda_function(power_curve(1.0), 0.5)


# --- composition with a Zvonkin map ---------------------------------------------------

def test_composition_constant_bounded():
    grid = Grid((-3.0, -3.0), (3.0, 3.0), (121, 121))
    zmap = build_zvonkin(identity_field(2), vector_field(["-x1", "-x2"], 2), Ball.with_support((0.0, 0.0), 1.2),
                         grid)
    f = scalar_field("abs(x1)^0.5 + sin(x2)", 2)
    out = composition_constant(f, zmap, grid, np.array([0.1, 0.2, 0.4]))
    assert 0 < out["gamma"] <= 1
    assert out["C"] <= 50


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 3]))
def test_uniform_matrix_matches_brute_force(seed, d):
    shape = (9,) * d if d < 3 else (5, 5, 5)
    grid = Grid((0.0,) * d, (1.0,) * d, shape)
    rng = np.random.default_rng(seed)
    B = rng.normal(size=shape + (d, d))
    vals = B + np.swapaxes(B, -1, -2)
    radii = np.array([1.0, 2.0, 4.0]) * grid.h.max()
    curve = uniform_modulus(SampledField(grid, vals), grid, radii)
    pts = grid.points().reshape(-1, d)
    flat = vals.reshape(-1, d, d)
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    norms = np.abs(np.linalg.eigvalsh(flat[:, None] - flat[None])).max(axis=-1)
    expected = [norms[dist <= r * (1 + 1e-12)].max() for r in radii]
    np.testing.assert_allclose(curve.values, np.maximum.accumulate(expected), rtol=1e-12)
