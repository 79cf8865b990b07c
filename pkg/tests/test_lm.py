import numpy as np
import pytest

from qelab.errors import ConvergenceError
from qelab.lm import covariance, levenberg_marquardt, numerical_jacobian


def rosenbrock(x):
    return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])


def test_linear_problem_matches_lstsq():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((40, 4))
    b = rng.standard_normal(40)
    res = levenberg_marquardt(lambda x: A @ x - b, np.zeros(4), lambda x: A)
    np.testing.assert_allclose(res.x, np.linalg.lstsq(A, b, rcond=None)[0], rtol=1e-8)
    assert res.converged


def test_rosenbrock():
    res = levenberg_marquardt(rosenbrock, [-1.2, 1.0])
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)
    assert res.cost <= res.initial_cost


def test_exponential_decay_exact():
    t = np.linspace(0, 10, 50)
    y = 3.0 * np.exp(-t / 2.5)
    res = levenberg_marquardt(lambda p: p[0] * np.exp(-t / p[1]) - y, [1.0, 1.0])
    np.testing.assert_allclose(res.x, [3.0, 2.5], rtol=1e-8)


def test_cost_never_increases():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x0 = rng.uniform(-3, 3, 2)
        res = levenberg_marquardt(rosenbrock, x0, raise_on_failure=False)
        assert res.cost <= res.initial_cost


def test_convergence_error_carries_best():
    with pytest.raises(ConvergenceError) as info:
        levenberg_marquardt(rosenbrock, [-1.2, 1.0], max_iter=2)
    err = info.value
    assert err.best_params is not None and len(err.best_params) == 2
    assert err.cost <= float(np.sum(rosenbrock(np.array([-1.2, 1.0])) ** 2))


def test_non_finite_start():
    with pytest.raises(ConvergenceError):
        levenberg_marquardt(lambda x: np.array([np.nan]), [0.0])


def test_numerical_jacobian():
    x = np.array([0.3, -0.7])
    J = numerical_jacobian(rosenbrock, x)
    exact = np.array([[-20 * x[0], 10.0], [-1.0, 0.0]])
    np.testing.assert_allclose(J, exact, atol=1e-6)


def test_covariance_scale_robust():
    J = np.array([[1e-6, 0.0], [0.0, 1e6], [1e-6, 1e6]])
    # J^T J = [[2e-12, 1], [1, 2e12]]; its inverse by hand
    exact = np.array([[2e12, -1.0], [-1.0, 2e-12]]) / 3.0
    np.testing.assert_allclose(covariance(J), exact, rtol=1e-9)
