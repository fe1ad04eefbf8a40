import numpy as np
import pytest

from kolmogorov.fields import Ball, ConstantField, Grid, identity_field, matrix_field, vector_field
from kolmogorov.zvonkin import ZvonkinError, ZvonkinMap, build_zvonkin, spectral_norm


@pytest.fixture(scope="module")
def ou_map():
    grid = Grid((-6.0, -6.0), (6.0, 6.0), (121, 121))
    ball = Ball.with_support((0.0, 0.0), 1.5)
    zmap = build_zvonkin(identity_field(2), vector_field(["-x1", "-x2"], 2), ball, grid, delta=0.2)
    return zmap


def test_zero_drift_gives_identity():
    grid = Grid((-3.0, -3.0), (3.0, 3.0), (31, 31))
    zmap = build_zvonkin(identity_field(2), ConstantField(np.zeros(2), 2), Ball((0.0, 0.0), 0.5), grid,
                         lam0=1.0)
    assert zmap.lam == 1.0
    assert np.all(zmap.u == 0)
    x = np.array([[0.3, -1.2], [2.0, 2.5]])
    np.testing.assert_array_equal(zmap.forward(x), x)
    np.testing.assert_array_equal(zmap.jacobian(x), np.broadcast_to(np.eye(2), (2, 2, 2)))
    y, its = zmap.inverse(x, return_iterations=True)
    np.testing.assert_array_equal(y, x)
    assert its == 1


def test_accepted_map_invariants(ou_map):
    z = ou_map
    assert z.op_norm_sup <= z.delta <= 0.5
    lo, hi = z.det_range
    assert 0.5 <= lo and hi <= 2.0
    assert max(z.residuals) <= 1e-8
    assert z.lambda_schedule[-1] == z.lam
    assert all(b == 2 * a for a, b in zip(z.lambda_schedule, z.lambda_schedule[1:]))
    inv = np.linalg.inv(np.eye(2) + z.du)
    assert np.max(spectral_norm(inv)) <= 2.0


def test_bi_lipschitz_random_pairs(ou_map):
    rng = np.random.default_rng(0)
    x = rng.uniform(-5.5, 5.5, size=(1000, 2))
    y = rng.uniform(-5.5, 5.5, size=(1000, 2))
    dx = np.linalg.norm(x - y, axis=-1)
    dphi = np.linalg.norm(ou_map.forward(x) - ou_map.forward(y), axis=-1)
    assert np.all(dphi >= 0.5 * dx * (1 - 1e-9))
    assert np.all(dphi <= 2.0 * dx * (1 + 1e-9))


def test_round_trip(ou_map):
    x = np.random.default_rng(1).uniform(-5.0, 5.0, size=(1000, 2))
    back = ou_map.inverse(ou_map.forward(x))
    assert np.max(np.abs(back - x)) <= 1e-10


def test_inverse_rate(ou_map):
    y = np.random.default_rng(2).uniform(-2.0, 2.0, size=(50, 2))
    _, its = ou_map.inverse(y, return_iterations=True)
    assert its <= 45


def test_doubling_drift_never_lowers_lambda():
    grid = Grid((-4.0, -4.0), (4.0, 4.0), (81, 81))
    ball = Ball.with_support((0.0, 0.0), 1.5)
    A = matrix_field([["1 + 0.2*sin(x1)", "0.1"], ["0.1", "1"]], 2)
    z1 = build_zvonkin(A, vector_field(["-x1 + sin(x2)", "-x2"], 2), ball, grid)
    z2 = build_zvonkin(A, vector_field(["2*(-x1 + sin(x2))", "-2*x2"], 2), ball, grid)
    assert z2.lam >= z1.lam


def test_constant_displacement_examples():
    grid = Grid((-2.0, -2.0), (2.0, 2.0), (21, 21))
    z = ZvonkinMap.from_displacement(grid, (0.4, 0.0))
    np.testing.assert_allclose(z.forward([[0.1, 0.2]]), [[0.5, 0.2]], atol=1e-15)
    g1 = Grid((-2.0,), (2.0,), (41,))
    z1 = ZvonkinMap.from_displacement(g1, 0.4)
    x, its = z1.inverse(np.array([[1.0]]), return_iterations=True)
    np.testing.assert_allclose(x, [[0.6]], atol=1e-14)
    assert its == 2


def test_out_of_box_errors(ou_map):
    with pytest.raises(ZvonkinError):
        ou_map.forward([[7.0, 0.0]])
    with pytest.raises(ZvonkinError):
        ou_map.jacobian([[0.0, -6.5]])
    with pytest.raises(ZvonkinError):
        ou_map.inverse([[0.0, 9.0]])


def test_delta_and_ball_preconditions():
    grid = Grid((-2.0, -2.0), (2.0, 2.0), (21, 21))
    b = vector_field(["-x1", "-x2"], 2)
    with pytest.raises(ValueError):
        build_zvonkin(identity_field(2), b, Ball((0.0, 0.0), 0.2), grid, delta=0.7)
    with pytest.raises(Exception):
        build_zvonkin(identity_field(2), b, Ball((0.0, 0.0), 1.0), grid)


def test_lambda_cap_reported():
    grid = Grid((-3.0, -3.0), (3.0, 3.0), (31, 31))
    b = vector_field(["-5*x1", "-5*x2"], 2)
    with pytest.raises(ZvonkinError, match="cap"):
        build_zvonkin(identity_field(2), b, Ball.with_support((0.0, 0.0), 1.5), grid, lam_cap=2.0)
