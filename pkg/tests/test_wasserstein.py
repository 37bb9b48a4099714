import numpy as np
import pytest
from scipy.optimize import linprog

from cheeger import FlowConfig, gradient_flow
from fields import ScalarField
from space import path_graph, random_space, two_point
from wasserstein import (
    DualAscentConfig,
    MeasureError,
    ProbMeasure,
    chain_closure_check,
    dissipation_bridge_check,
    dual_objective,
    duality_check,
    kuwada_check,
    kuwada_halving_check,
    measure_from_json,
    measure_to_json,
    metric_axioms_check,
    p_monotonicity_check,
    transportation_simplex,
    wasserstein_dual,
    wasserstein_primal,
)


def random_measure(space, rng):
    return ProbMeasure(space, rng.dirichlet(np.ones(space.n)))


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_diracs_on_two_points(x2, p):
    value, coupling = wasserstein_primal(ProbMeasure.dirac(x2, "a"), ProbMeasure.dirac(x2, "b"), p)
    assert value == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(coupling.matrix, [[0.0, 1.0], [0.0, 0.0]])


def test_endpoints_of_p3(p3):
    mu = ProbMeasure(p3, [1.0, 0.0, 0.0])
    nu = ProbMeasure(p3, [0.0, 0.0, 1.0])
    value, _ = wasserstein_primal(mu, nu, 2.0)
    assert value == pytest.approx(1.0, abs=1e-12)


def test_identical_measures(triangle):
    mu = ProbMeasure(triangle, [0.2, 0.3, 0.5])
    value, coupling = wasserstein_primal(mu, mu, 2.0)
    assert value == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(coupling.matrix, np.diag(mu.mass), atol=1e-15)


def test_measure_validation(x2):
    with pytest.raises(MeasureError, match="sum"):
        ProbMeasure(x2, [0.5, 0.6])
    with pytest.raises(MeasureError, match="nonnegative"):
        ProbMeasure(x2, [1.5, -0.5])
    with pytest.raises(MeasureError, match="entries"):
        ProbMeasure(x2, [1.0])
    with pytest.raises(MeasureError):
        ProbMeasure.from_density(ScalarField(x2, [0.0, 0.0]))


def test_measures_on_distinct_spaces_are_rejected(x2):
    # equal size is not enough, the measures must share one space
    mu = ProbMeasure(x2, [1.0, 0.0])
    nu = ProbMeasure(two_point(), [0.0, 1.0])
    with pytest.raises(MeasureError, match="different spaces"):
        wasserstein_primal(mu, nu, 2.0)
    with pytest.raises(MeasureError, match="different spaces"):
        wasserstein_dual(mu, nu, 2.0)


def test_density_and_json(triangle):
    mu = ProbMeasure.from_density(ScalarField(triangle, [1.0, 1.0, 1.0]))
    np.testing.assert_allclose(mu.mass, triangle.measure / triangle.total_measure)
    np.testing.assert_allclose(mu.density, np.full(3, 1 / triangle.total_measure))
    restored = measure_from_json(triangle, measure_to_json(mu))
    np.testing.assert_allclose(restored.mass, mu.mass)


@pytest.mark.parametrize("seed", range(8))
def test_transportation_simplex_matches_linprog(seed):
    rng = np.random.default_rng(seed)
    m, n = 4, 5
    supply = rng.dirichlet(np.ones(m))
    demand = rng.dirichlet(np.ones(n))
    cost = rng.uniform(0.0, 3.0, size=(m, n))
    total, flow, u, v = transportation_simplex(supply, demand, cost)

    A_eq = np.vstack([np.kron(np.eye(m), np.ones(n)), np.kron(np.ones(m), np.eye(n))])
    reference = linprog(cost.ravel(), A_eq=A_eq, b_eq=np.concatenate([supply, demand]), method="highs")
    assert total == pytest.approx(reference.fun, abs=1e-10)
    np.testing.assert_allclose(flow.sum(axis=1), supply, atol=1e-12)
    np.testing.assert_allclose(flow.sum(axis=0), demand, atol=1e-12)
    assert np.all(flow >= -1e-15)
    assert np.all(u[:, None] + v[None, :] <= cost + 1e-10)
    assert supply @ u + demand @ v == pytest.approx(total, abs=1e-10)


def test_degenerate_transportation():
    # equal supplies and demands force degenerate pivots
    supply = np.full(3, 1 / 3)
    cost = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 2.0], [2.0, 2.0, 0.0]])
    total, flow, _, _ = transportation_simplex(supply, supply, cost)
    assert total == pytest.approx(0.0, abs=1e-15)
    assert np.count_nonzero(flow > 1e-15) == 3


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_primal_on_random_spaces(seed, p):
    space = random_space(seed, 7)
    rng = np.random.default_rng([seed, 5])
    mu, nu = random_measure(space, rng), random_measure(space, rng)
    value, coupling = wasserstein_primal(mu, nu, p)
    assert coupling.marginal_error(mu, nu) <= 1e-10
    assert coupling.support_size <= 2 * space.n - 1
    assert np.sum(coupling.matrix * space.dist ** p) ** (1 / p) == pytest.approx(value, rel=1e-12)


def test_two_point_dual(x2):
    mu, nu = ProbMeasure.dirac(x2, "a"), ProbMeasure.dirac(x2, "b")
    warm, _ = wasserstein_dual(mu, nu, 2.0)
    cold, psi = wasserstein_dual(mu, nu, 2.0, DualAscentConfig(warm_start=False))
    assert warm == pytest.approx(0.5, abs=1e-8)
    assert cold == pytest.approx(0.5, abs=1e-8)
    assert dual_objective(psi, mu, nu, 2.0) == pytest.approx(cold)


def test_dual_of_identical_measures(triangle):
    mu = ProbMeasure(triangle, [0.2, 0.3, 0.5])
    bound, _ = wasserstein_dual(mu, mu, 2.0, DualAscentConfig(warm_start=False, iterations=20))
    assert bound == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_duality_on_random_spaces(seed, p):
    space = random_space(seed, 8)
    rng = np.random.default_rng([seed, 9])
    mu, nu = random_measure(space, rng), random_measure(space, rng)
    assert duality_check(mu, nu, p).passed

    primal, _ = wasserstein_primal(mu, nu, p)
    cold, _ = wasserstein_dual(mu, nu, p, DualAscentConfig(warm_start=False, iterations=50))
    assert cold <= primal ** p / p + 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_metric_axioms(seed):
    space = random_space(seed, 6)
    rng = np.random.default_rng([seed, 13])
    measures = [random_measure(space, rng) for _ in range(3)]
    assert metric_axioms_check(measures, 2.0).passed


def test_p_monotonicity_on_unit_diameter():
    space = path_graph(4)
    rng = np.random.default_rng(3)
    mu, nu = random_measure(space, rng), random_measure(space, rng)
    report = p_monotonicity_check(mu, nu, 1.5, 3.0)
    assert report.passed
    assert report.details["count"] == 2
    with pytest.raises(ValueError):
        p_monotonicity_check(mu, nu, 3.0, 2.0)


def two_point_trace(tau, steps):
    f0 = ScalarField(two_point(), [0.5, 1.5])
    return gradient_flow(f0, FlowConfig(2.0, tau, steps))


@pytest.mark.parametrize("tau", [0.05, 0.2])
def test_kuwada_two_point_one_step(tau):
    trace = two_point_trace(tau, 1)
    report = kuwada_check(trace, 2.0)
    assert report.passed

    total = 2.0
    mu = ProbMeasure(trace.space, trace.fields[0].values / total)
    nu = ProbMeasure(trace.space, trace.fields[1].values / total)
    w, _ = wasserstein_primal(mu, nu, 2.0)
    assert w ** 2 == pytest.approx(tau / (1 + 4 * tau), abs=1e-9)


def test_bridge_and_closure_on_two_points():
    trace = two_point_trace(0.05, 10)
    assert dissipation_bridge_check(trace, 2.0).passed
    report = chain_closure_check(trace, 2.0)
    assert report.passed
    assert report.details["window"] == 1
    assert report.details["relaxation"].startswith("slope")
    # slope and minimal upper gradient agree on two points
    assert report.details["min_ug_initial"] == pytest.approx(report.details["initial"], rel=1e-7)


def test_kuwada_allowance_draw_halves_on_two_points():
    f0 = ScalarField(two_point(), [0.5, 1.5])
    report = kuwada_halving_check(f0, 2.0, 0.05, 4, trace=two_point_trace(0.05, 4))
    assert report.passed, report.details
    assert [row["tau"] for row in report.details["rows"]] == [0.05, 0.025, 0.0125]
    assert all(row["pass"] for row in report.details["rows"])
    # the first step draws tau/(1+4tau) minus the slack-weighted speed
    assert report.details["rows"][0]["allowance_used"] == pytest.approx(0.03936, abs=1e-4)
    for ratio in report.details["ratios"]:
        assert 0.5 <= ratio <= 0.6


def test_kuwada_halving_fails_on_an_unreachable_shrink():
    f0 = ScalarField(two_point(), [0.5, 1.5])
    report = kuwada_halving_check(f0, 2.0, 0.05, 2, shrink=0.1)
    assert not report.passed
    assert report.details["parts"] == ["kuwada_shrink", "kuwada_shrink"]


def test_constant_trace_is_trivial(p5):
    trace = gradient_flow(ScalarField(p5, np.ones(5)), FlowConfig(2.0, 0.1, 3))
    assert kuwada_check(trace, 2.0).passed
    assert dissipation_bridge_check(trace, 2.0).passed
    assert chain_closure_check(trace, 2.0).passed


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_bridge_on_random_flows(seed, p, make_field):
    q = p / (p - 1)
    space = random_space(seed, 6)
    f0 = make_field(space, seed, 0.5, 1.5)
    trace = gradient_flow(f0, FlowConfig(q, 0.01, 10))
    assert kuwada_check(trace, p).passed
    assert dissipation_bridge_check(trace, p).passed


def test_exponent_mismatch():
    trace = two_point_trace(0.1, 1)
    with pytest.raises(MeasureError, match="dual"):
        kuwada_check(trace, 3.0)


def test_density_floor(x2):
    trace = gradient_flow(ScalarField(x2, [0.0, 1.0]), FlowConfig(2.0, 0.1, 1))
    with pytest.raises(MeasureError, match="floor"):
        kuwada_check(trace, 2.0)
