import numpy as np
import pytest
from scipy.optimize import minimize

import optim
from optim import SolverError, projected_newton, projected_gradient_norm, solve_min_energy


def quadratic(center):
    center = np.asarray(center, dtype=float)

    def objective(x):
        return float(np.sum((x - center) ** 2)), 2 * (x - center), 2 * np.eye(len(x))
    return objective


def test_projected_newton_hits_the_bound():
    result = projected_newton(quadratic([-1.0, 2.0, 0.5]), np.ones(3))
    assert result.converged
    np.testing.assert_allclose(result.x, [0.0, 2.0, 0.5], atol=1e-10)
    assert result.projected_gradient <= 1e-12


def test_projected_gradient_ignores_blocked_directions():
    assert projected_gradient_norm(np.array([0.0, 1.0]), np.array([5.0, 0.0])) == 0.0
    assert projected_gradient_norm(np.array([0.0, 1.0]), np.array([-5.0, 0.0])) == 5.0


def test_unbounded_objective_raises_with_diagnostics():
    def linear(x):
        return -float(x.sum()), -np.ones_like(x), np.zeros((len(x), len(x)))

    with pytest.raises(SolverError) as info:
        projected_newton(linear, np.zeros(2), max_iter=5)
    assert info.value.diagnostics["iterations"] == 5
    assert info.value.diagnostics["x"].shape == (2,)


def test_converges_below_the_objective_rounding_floor():
    # a large offset hides the last Newton decreases in the value
    center = np.array([0.5, 1.5, -1.0])

    def quartic(x):
        d = x - center
        value = 1e8 + float(np.sum(d ** 4 / 4 + d ** 2 / 2))
        return value, d ** 3 + d, np.diag(3 * d ** 2 + 1)

    result = projected_newton(quartic, np.ones(3))
    assert result.converged
    assert result.projected_gradient <= 1e-12
    np.testing.assert_allclose(result.x, [0.5, 1.5, 0.0], atol=1e-10)


@pytest.mark.parametrize("q", [1.5, 2.0, 3.0])
def test_two_point_energy(q):
    solution = solve_min_energy([[0.5, 0.5]], [1.0], [1.0, 1.0], q)
    np.testing.assert_allclose(solution.rho, [1.0, 1.0], atol=1e-8)
    assert solution.value == pytest.approx(2.0, abs=1e-8)
    assert solution.dual_value == pytest.approx(2.0, abs=1e-8)
    assert solution.kkt_residual <= 1e-9


def test_end_to_end_path_on_p3():
    # coefficients of the path 0 -> 1 -> 2 at spacing 1/2
    solution = solve_min_energy([[0.25, 0.5, 0.25]], [1.0], np.full(3, 1 / 3), 2.0)
    assert solution.value == pytest.approx(8 / 9, abs=1e-8)
    np.testing.assert_allclose(solution.rho, [2 / 3, 4 / 3, 2 / 3], atol=1e-8)


def test_empty_program():
    solution = solve_min_energy(np.zeros((0, 3)), np.zeros(0), np.ones(3), 2.0)
    assert solution.value == 0.0
    np.testing.assert_array_equal(solution.rho, np.zeros(3))


def test_rejects_small_exponent():
    with pytest.raises(ValueError):
        solve_min_energy([[1.0]], [1.0], [1.0], 1.0)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("q", [1.5, 2.0, 3.0])
def test_agrees_with_slsqp(seed, q):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.0, 1.0, size=(4, 5)) * (rng.random((4, 5)) < 0.7)
    A[:, 0] += 0.1
    b = rng.uniform(0.5, 1.5, size=4)
    m = rng.uniform(0.5, 1.5, size=5)
    solution = solve_min_energy(A, b, m, q)

    assert np.all(A @ solution.rho >= b - 1e-8)
    assert solution.value == pytest.approx(solution.dual_value, rel=1e-7, abs=1e-9)

    reference = minimize(
        lambda x: float(np.sum(m * np.abs(x) ** q)),
        np.full(5, 2.0),
        method="SLSQP",
        bounds=[(0, None)] * 5,
        constraints=[{"type": "ineq", "fun": lambda x: A @ x - b}],
        options={"ftol": 1e-12, "maxiter": 500},
    )
    assert solution.value <= reference.fun + 1e-6 * (1 + reference.fun)


def _stalled_at(lam):
    def stalled(objective, x0, **kwargs):
        raise SolverError("projected Newton stalled",
                          {"iterations": 7, "projected_gradient": 1e-8, "value": 0.0, "x": np.asarray(lam)})
    return stalled


def test_stalled_solve_is_accepted_on_a_tight_duality_gap(monkeypatch):
    # on X2 the optimal multiplier of the single path is 4
    monkeypatch.setattr(optim, "projected_newton", _stalled_at([4.0 + 1e-10]))
    solution = solve_min_energy([[0.5, 0.5]], [1.0], [1.0, 1.0], 2.0)
    assert solution.kkt["certified"]
    assert solution.kkt["infeasibility"] == 0.0
    assert 0.0 <= solution.kkt["duality_gap"] <= 1e-9
    assert 0.5 * solution.rho.sum() >= 1.0
    assert solution.value == pytest.approx(2.0, abs=1e-8)
    assert solution.dual_value <= solution.value


def test_stalled_solve_far_from_optimum_still_raises(monkeypatch):
    monkeypatch.setattr(optim, "projected_newton", _stalled_at([1.0]))
    with pytest.raises(SolverError, match="stalled") as info:
        solve_min_energy([[0.5, 0.5]], [1.0], [1.0, 1.0], 2.0)
    assert info.value.diagnostics["duality_gap"] == pytest.approx(1.125)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("q", [1.5, 3.0])
def test_path_programs_reach_tolerance(seed, q):
    rng = np.random.default_rng(seed)
    n, k = 6, 12
    A = np.zeros((k, n))
    for row in A:
        vertices = rng.choice(n, size=rng.integers(2, n + 1), replace=False)
        lengths = rng.uniform(0.5, 1.5, size=len(vertices) - 1)
        for i, w in enumerate(lengths):
            row[vertices[i]] += w / 2
            row[vertices[i + 1]] += w / 2
    b = rng.uniform(0.1, 1.0, size=k)
    m = rng.uniform(0.5, 1.5, size=n)
    solution = solve_min_energy(A, b, m, q)
    assert solution.kkt["infeasibility"] <= 2e-9
    assert solution.kkt["duality_gap"] <= 1e-9 * (1 + solution.value)
