import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exoendo.errors import DimensionError, DomainError, NumericError
from exoendo.manifold import (
    DescentSettings,
    StiefelPoint,
    minimize,
    numeric_gradient,
    random_point,
    retract,
    tangent_project,
)


def _sym(rng, d):
    a = rng.standard_normal((d, d))
    return (a + a.T) / 2


def test_stiefel_point_rejects_non_orthonormal():
    with pytest.raises(DomainError):
        StiefelPoint(np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(DimensionError):
        StiefelPoint(np.ones((2, 3)))


def test_stiefel_point_repairs_small_drift():
    w = np.eye(3)[:, :2] + 1e-6
    assert StiefelPoint(w).residual() < 1e-12


def test_tangent_project_removes_normal_direction(rng):
    w = random_point(5, 2, 3)
    np.testing.assert_allclose(tangent_project(w, w.w), 0, atol=1e-14)


def test_tangent_project_keeps_tangent_vector():
    w = StiefelPoint(np.array([[1.0], [0.0]]))
    np.testing.assert_allclose(tangent_project(w, [[0.0], [1.0]]), [[0.0], [1.0]])


def test_tangent_project_shape_mismatch():
    with pytest.raises(DimensionError):
        tangent_project(random_point(4, 2, 0), np.ones((4, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_tangent_projection_is_skew(seed):
    r = np.random.default_rng(seed)
    w = random_point(4, 2, seed)
    xi = tangent_project(w, r.standard_normal((4, 2)))
    m = w.w.T @ xi
    np.testing.assert_allclose(m + m.T, 0, atol=1e-12)


def test_retract_zero_step_and_known_step():
    w = random_point(5, 3, 1)
    np.testing.assert_allclose(retract(w, np.zeros((5, 3))).w, w.w, atol=1e-12)
    e1 = StiefelPoint(np.array([[1.0], [0.0]]))
    np.testing.assert_allclose(retract(e1, [[0.0], [1.0]]).w, np.array([[1.0], [1.0]]) / np.sqrt(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.01, 5.0))
def test_retract_stays_on_manifold(seed, p, scale):
    r = np.random.default_rng(seed)
    w = random_point(6, p, seed)
    out = retract(w, scale * tangent_project(w, r.standard_normal((6, p))))
    assert out.residual() < 1e-10


def test_numeric_gradient_quadratic(rng):
    a = _sym(rng, 5)
    w = random_point(5, 2, 7)
    g = numeric_gradient(lambda m: np.trace(m.T @ a @ m), w, 1e-6)
    exact = 2 * a @ w.w
    assert np.linalg.norm(g - exact) / np.linalg.norm(exact) < 1e-5


def test_numeric_gradient_trivial_objectives():
    w = random_point(4, 2, 0)
    np.testing.assert_allclose(numeric_gradient(lambda m: 3.0, w), 0)
    np.testing.assert_allclose(numeric_gradient(np.sum, w), 1, atol=1e-8)


def test_numeric_gradient_reports_nonfinite():
    w = random_point(3, 1, 0)
    with pytest.raises(NumericError):
        numeric_gradient(lambda m: np.inf if m[1, 0] > w.w[1, 0] else 0.0, w)


def test_minimize_smallest_eigenvector(rng):
    a = _sym(rng, 4)
    vals, vecs = np.linalg.eigh(a)
    res = minimize(lambda m: np.trace(m.T @ a @ m), 4, 1, gradient=lambda m: 2 * a @ m)
    assert res.final_value == pytest.approx(vals[0], abs=1e-6)
    assert abs(abs(float(res.point.w[:, 0] @ vecs[:, 0])) - 1) < 1e-6


def test_minimize_fd_gradient_path(rng):
    a = _sym(rng, 4)
    res = minimize(lambda m: np.trace(m.T @ a @ m), 4, 1, rng_seed=2)
    assert res.final_value == pytest.approx(np.linalg.eigvalsh(a)[0], abs=1e-6)


def test_minimize_orthogonal_group():
    # O(d) has two components; I is only reachable from the det = +1 one
    eye = np.eye(3)
    w = random_point(3, 3, 5).w.copy()
    if np.linalg.det(w) < 0:
        w[:, 0] *= -1
    res = minimize(lambda m: np.sum((m - eye) ** 2), 3, 3, init=StiefelPoint(w), gradient=lambda m: 2 * (m - eye))
    assert res.final_value < 1e-8


def test_minimize_constant_objective_returns_init():
    init = random_point(5, 2, 9)
    res = minimize(lambda m: 1.0, 5, 2, init=init)
    assert res.iterations <= 1 and res.converged
    np.testing.assert_array_equal(res.point.w, init.w)


def test_minimize_monotone_and_deterministic(rng):
    a = _sym(rng, 6)
    f = lambda m: np.trace(m.T @ a @ m) + 0.1 * np.sum(m ** 4)
    r1 = minimize(f, 6, 2, rng_seed=11, settings=DescentSettings(max_iterations=60))
    r2 = minimize(f, 6, 2, rng_seed=11, settings=DescentSettings(max_iterations=60))
    assert np.all(np.diff(r1.history) <= 1e-15)
    np.testing.assert_array_equal(r1.point.w, r2.point.w)
    assert r1.history == r2.history


def test_minimize_nan_objective():
    with pytest.raises(NumericError):
        minimize(lambda m: np.nan, 3, 1)


def test_minimize_bad_dimensions():
    with pytest.raises(DimensionError):
        minimize(lambda m: 0.0, 3, 4)
