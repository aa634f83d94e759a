import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmgda.problems import (
    OracleError, PLQuadratic, ProblemInstance, Sin2PL, best_response, draw_sample, dumps, grad,
    loads, make_plquadratic, make_sin2pl, maximize_dual, oracle_F, phi,
)


@pytest.fixture
def hand_sin2pl():
    # f_1 = x^2 - phi(y - x), f_2 = -x^2/2 - phi(y - x)
    return Sin2PL(D=[[[2.0]], [[-1.0]]], c=[[0.0], [0.0]], P=[[1.0]], sigma=0.0)


def test_hand_instance_closed_form(hand_sin2pl):
    for x in (-2.0, -0.3, 0.0, 0.7, 3.0):
        res = hand_sin2pl.oracle_F(np.array([x]))
        assert res.value == pytest.approx(x**2 / 4, abs=1e-15)
        assert res.grad[0] == pytest.approx(x / 2, abs=1e-15)
        assert best_response(hand_sin2pl, np.array([x]))[0] == x


def test_hand_instance_against_grid_ascent(hand_sin2pl):
    x = 0.8
    ys = np.linspace(-5, 5, 200_001)
    vals = [hand_sin2pl.objective(np.array([x]), np.array([y])) for y in ys[::1000]]
    fine = ys[np.argmax(vals) * 1000 - 1000: np.argmax(vals) * 1000 + 1000]
    vals = np.array([hand_sin2pl.objective(np.array([x]), np.array([y])) for y in fine])
    assert fine[np.argmax(vals)] == pytest.approx(x, abs=1e-4)
    assert vals.max() == pytest.approx(x**2 / 4, abs=1e-12)
    h = 1e-5
    fd = (hand_sin2pl.oracle_F([x + h]).value - hand_sin2pl.oracle_F([x - h]).value) / (2 * h)
    assert fd == pytest.approx(x / 2, rel=1e-8)


def test_sin2pl_residual_vanishes_at_best_response():
    prob = make_sin2pl(4, 3, 2, sigma=0.0, seed=3)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal(3)
        y = prob.best_response(x)
        assert prob.oracle_F(x).value - prob.objective(x, y) == pytest.approx(0.0, abs=1e-12)
        for i in range(prob.m):
            assert np.all(grad(prob, i, x, y)[1] == 0.0)


def test_sin2pl_F_is_average_of_primal_parts():
    prob = make_sin2pl(5, 3, sigma=0.0, seed=1)
    x = np.array([0.3, -1.0, 2.0])
    g = [0.5 * (x - prob.c[i]) @ prob.D[i] @ (x - prob.c[i]) for i in range(5)]
    assert prob.oracle_F(x).value == pytest.approx(np.mean(g), rel=1e-13)


def test_phi_shape():
    z = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(phi(z), z**2 + 3 * np.sin(z) ** 2)
    assert phi(np.array([0.0]))[0] == 0.0


def test_plquadratic_linear_F_when_coupling_vanishes():
    m, d, p = 3, 2, 2
    a = np.array([[1.0, 2.0], [0.0, -1.0], [2.0, 2.0]])
    with pytest.warns(UserWarning, match="unbounded"):
        prob = PLQuadratic(np.zeros((m, d, d)), np.zeros((m, d, p)), np.tile(np.eye(p), (m, 1, 1)),
                           a, np.zeros((m, p)))
    x = np.array([0.5, -2.0])
    res = prob.oracle_F(x)
    assert res.value == pytest.approx(a.mean(0) @ x)
    np.testing.assert_allclose(res.grad, a.mean(0))
    np.testing.assert_allclose(prob.best_response(x), 0.0)


def _singular_instance():
    # C_bar = diag(1, 0); B_bar^T x + b_bar = (x_1 + 0.5, 0)
    A = np.array([[[2.0, 0.0], [0.0, 1.0]], [[0.0, 0.5], [0.5, 1.0]]])
    B = np.array([[[1.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]]])
    C = np.array([np.diag([1.5, 0.0]), np.diag([0.5, 0.0])])
    a = np.array([[1.0, 0.0], [-1.0, 2.0]])
    b = np.array([[1.0, 0.0], [0.0, 0.0]])
    return PLQuadratic(A, B, C, a, b)


def test_plquadratic_pseudoinverse_closed_form():
    prob = _singular_instance()
    assert prob.constants.mu == pytest.approx(1.0)
    x = np.array([0.4, -0.3])
    t = x[0] + 0.5
    np.testing.assert_allclose(prob.best_response(x), [t, 0.0], atol=1e-14)
    A_bar, a_bar = prob.A_bar, prob.a_bar
    expected = 0.5 * x @ A_bar @ x + a_bar @ x + 0.5 * t**2
    assert prob.oracle_F(x).value == pytest.approx(expected, rel=1e-13)
    # independent check: multi-start gradient ascent through the generic fallback
    fallback = ProblemInstance.oracle_F(prob, x)
    assert fallback.approximate
    assert fallback.value == pytest.approx(expected, abs=1e-8)
    y_ascent, _ = maximize_dual(prob, x)
    assert prob.argmax_distance(x, y_ascent) <= 1e-8


def test_plquadratic_scalar_dual_matches_fallback():
    prob = make_plquadratic(3, 2, 1, mu=1.0, cond_y=1.0, sigma=0.0, seed=4)
    np.testing.assert_allclose(prob.C_bar, [[1.0]])
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.standard_normal(2)
        exact = prob.oracle_F(x).value
        approx = ProblemInstance.oracle_F(prob, x).value
        assert abs(exact - approx) <= 1e-8


def test_single_node_zero_coupling_best_response_is_zero():
    prob = PLQuadratic([[[1.0]]], [[[0.0, 0.0]]], [np.eye(2)], [[0.3]], [[0.0, 0.0]])
    np.testing.assert_array_equal(prob.best_response(np.array([5.0])), [0.0, 0.0])


@pytest.mark.parametrize("family", ["sin2pl", "plquadratic"])
def test_F_gradient_matches_central_differences(family):
    prob = make_sin2pl(4, 3, 2, seed=2) if family == "sin2pl" else make_plquadratic(4, 3, 3, seed=2)
    rng = np.random.default_rng(5)
    h = 1e-5
    for _ in range(20):
        x = 2 * rng.standard_normal(3)
        g = prob.oracle_F(x).grad
        fd = np.array([(prob.oracle_F(x + h * e).value - prob.oracle_F(x - h * e).value) / (2 * h)
                       for e in np.eye(3)])
        assert np.linalg.norm(fd - g) <= 1e-5 * max(1.0, np.linalg.norm(g))


def test_plquadratic_rejects_coupling_outside_range():
    C = np.array([np.diag([1.0, 0.0])])
    with pytest.raises(ValueError, match="outside range"):
        PLQuadratic([[[1.0]]], [[[0.0, 1.0]]], C, [[0.0]], [[0.0, 0.0]])
    with pytest.raises(ValueError, match="outside range"):
        PLQuadratic([[[1.0]]], [[[1.0, 0.0]]], C, [[0.0]], [[0.0, 2.0]])


def test_plquadratic_rejects_indefinite_and_zero_dual_curvature():
    with pytest.raises(ValueError, match="semidefinite"):
        PLQuadratic([[[1.0]]], [[[0.0]]], [[[-1.0]]], [[0.0]], [[0.0]])
    with pytest.raises(ValueError, match="zero"):
        PLQuadratic([[[1.0]]], [[[0.0]]], [[[0.0]]], [[0.0]], [[0.0]])


def test_generated_plquadratic_has_singular_dual_and_bounded_F():
    prob = make_plquadratic(6, 4, 3, mu=0.5, cond_y=4.0, seed=0)
    evals = np.linalg.eigvalsh(prob.C_bar)
    assert abs(evals[0]) < 1e-12
    assert prob.constants.mu == pytest.approx(0.5)
    assert np.isfinite(prob.constants.F_star_lower_bound)
    assert np.linalg.eigvalsh(prob.H_F).min() == pytest.approx(0.5)


@pytest.mark.parametrize("family", ["sin2pl", "plquadratic"])
def test_pl_inequality_on_samples(family):
    prob = make_sin2pl(4, 3, 3, seed=1) if family == "sin2pl" else make_plquadratic(4, 3, 3, seed=1)
    rng = np.random.default_rng(2)
    mu = prob.constants.mu
    for _ in range(300):
        x = 2 * rng.standard_normal(3)
        y = prob.best_response(x) + 3 * rng.standard_normal(3)
        gap = prob.oracle_F(x).value - prob.objective(x, y)
        gy = prob.objective_grad(x, y)[1]
        assert gy @ gy >= 2 * mu * gap - 1e-10 * (1 + abs(gap))


def test_sample_mode_without_noise_equals_exact():
    prob = make_sin2pl(3, 2, 2, sigma=0.0, seed=0)
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal(2), rng.standard_normal(2)
    for i in range(3):
        exact = grad(prob, i, x, y)
        sampled = grad(prob, i, x, y, draw_sample(prob, rng))
        for e, s in zip(exact, sampled):
            np.testing.assert_array_equal(e, s)


def test_stochastic_gradient_monte_carlo_mean():
    sigma = 1.0
    prob = make_plquadratic(2, 2, 2, sigma=sigma, seed=0)
    rng = np.random.default_rng(7)
    x, y = rng.standard_normal(2), rng.standard_normal(2)
    n = 1_000_000
    xi = rng.standard_normal((n, 4))
    for i in range(2):
        gx, gy = prob.sample_gradients(np.tile(x, (n, 1)), np.tile(y, (n, 1)), xi, np.full(n, i))
        ex, ey = grad(prob, i, x, y)
        dev = np.abs(np.concatenate([gx.mean(0) - ex, gy.mean(0) - ey]))
        assert dev.max() <= 5 * sigma / 1e3


def test_functional_surface_validates_shapes():
    prob = make_sin2pl(2, 3, 2, seed=0)
    with pytest.raises(ValueError):
        oracle_F(prob, np.zeros(2))
    with pytest.raises(ValueError):
        best_response(prob, np.zeros(4))
    with pytest.raises(IndexError):
        grad(prob, 2, np.zeros(3), np.zeros(2))


def test_fallback_maximizer_reports_failure():
    prob = make_sin2pl(2, 2, 2, seed=0)
    with pytest.raises(OracleError) as info:
        maximize_dual(prob, np.ones(2), starts=2, max_iter=3)
    assert info.value.best_y.shape == (2,)
    assert info.value.grad_norm > 0


def test_with_constants_leaves_original_untouched():
    prob = make_sin2pl(2, 2, seed=0)
    weaker = prob.with_constants(L_f=1.0)
    assert weaker.constants.L_f == 1.0
    assert prob.constants.L_f > 1.0


@settings(max_examples=25, deadline=None)
@given(family=st.sampled_from(["sin2pl", "plquadratic"]), m=st.integers(1, 5),
       d=st.integers(1, 4), p=st.integers(1, 4), seed=st.integers(0, 2**16),
       sigma=st.sampled_from([0.0, 0.5, 1.0]))
def test_json_round_trip_is_lossless(family, m, d, p, seed, sigma):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prob = (make_sin2pl(m, d, p, sigma=sigma, seed=seed) if family == "sin2pl"
                else make_plquadratic(m, d, p, sigma=sigma, seed=seed))
        back = loads(dumps(prob))
    assert type(back) is type(prob)
    assert back.constants == prob.constants
    assert dumps(back) == dumps(prob)
    x = np.linspace(-1, 1, d)
    assert back.oracle_F(x).value == prob.oracle_F(x).value
