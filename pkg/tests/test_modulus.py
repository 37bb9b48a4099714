import numpy as np
import pytest

from fields import DiscretePath, GradientField, ScalarField, discrete_slope
import modulus as modulus_module
from modulus import (
    DiscreteTestPlan,
    UpperGradientError,
    PathFamily,
    brute_force_min_upper_gradient,
    family_from_json,
    family_to_json,
    homogeneity_ug_check,
    min_upper_gradient,
    modulus,
    modulus_monotonicity_check,
    plan_compression,
    plan_from_json,
    plan_modulus_inequality,
    plan_to_json,
    random_family,
    random_plan,
    slope_feasibility_check,
    stability_check,
    upper_gradient_violations,
    weak_ug_check,
)
from space import path_graph, random_space


def test_two_point_modulus(x2):
    solution = modulus([DiscretePath(x2, [0, 1])], 2.0)
    assert solution.value == pytest.approx(2.0, abs=1e-8)
    np.testing.assert_allclose(solution.rho.values, [1.0, 1.0], atol=1e-8)
    assert solution.active_paths == [0]


def test_end_to_end_modulus_on_p3(p3):
    solution = modulus([DiscretePath(p3, [0, 1, 2])], 2.0)
    assert solution.value == pytest.approx(8 / 9, abs=1e-8)
    np.testing.assert_allclose(solution.rho.values, [2 / 3, 4 / 3, 2 / 3], atol=1e-8)


def test_empty_family(x2):
    assert modulus(PathFamily([]), 2.0, space=x2).value == 0.0
    with pytest.raises(ValueError):
        modulus(PathFamily([]), 2.0)


def test_family_deduplicates_reversals(p3):
    family = PathFamily([DiscretePath(p3, [0, 1, 2]), DiscretePath(p3, [2, 1, 0])])
    assert len(family) == 1
    assert DiscretePath(p3, [2, 1, 0]) in family


def test_two_point_min_upper_gradient(linear_x2):
    solution = min_upper_gradient(linear_x2, 2.0)
    assert solution.value == pytest.approx(2.0, abs=1e-8)
    np.testing.assert_allclose(solution.g.values, [1.0, 1.0], atol=1e-8)


def _weakened_solves(monkeypatch, adjust):
    solve = modulus_module._solve_constraints

    def weakened(f, paths, q):
        solution = solve(f, paths, q)
        adjust(solution)
        return solution

    monkeypatch.setattr(modulus_module, "_solve_constraints", weakened)


def test_known_paths_left_violated_raise(monkeypatch, linear_x2):
    def halve(solution):
        solution.rho = 0.5 * solution.rho

    _weakened_solves(monkeypatch, halve)
    with pytest.raises(UpperGradientError, match="known paths still violated") as info:
        min_upper_gradient(linear_x2, 2.0)
    np.testing.assert_allclose(info.value.last_iterate.values, [0.5, 0.5], atol=1e-8)
    assert [pair for pair, _, _ in info.value.violations] == [(0, 1)]
    assert info.value.violations[0][2] == pytest.approx(0.5, abs=1e-8)


def test_open_kkt_conditions_raise(monkeypatch, linear_x2):
    def unconverged(solution):
        solution.kkt["stationarity"] = 1e-3
        solution.kkt["duality_gap"] = 1e-3

    _weakened_solves(monkeypatch, unconverged)
    with pytest.raises(UpperGradientError) as info:
        min_upper_gradient(linear_x2, 2.0)
    assert info.value.violations == []
    assert info.value.diagnostics["stationarity"] == 1e-3


def test_min_upper_gradient_on_odd_path(p3):
    f = ScalarField(p3, [0.0, 0.5, 1.0])
    solution = min_upper_gradient(f, 2.0)
    assert solution.value == pytest.approx(8 / 9, abs=1e-8)
    np.testing.assert_allclose(solution.g.values, [2 / 3, 4 / 3, 2 / 3], atol=1e-7)


@pytest.mark.parametrize("n", [4, 8])
def test_min_upper_gradient_on_even_path_is_the_slope(n):
    space = path_graph(n)
    f = ScalarField(space, np.linspace(0, 1, n))
    solution = min_upper_gradient(f, 2.0)
    assert solution.value == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose(solution.g.values, np.ones(n), atol=1e-6)


def test_constant_field_has_zero_gradient(p5):
    solution = min_upper_gradient(ScalarField(p5, np.full(5, 3.0)), 2.0)
    assert solution.value == 0.0
    assert solution.iterations == 0


def test_oracle_finds_the_violating_pair(linear_x2):
    zero = GradientField(linear_x2.space, [0.0, 0.0])
    violations = upper_gradient_violations(linear_x2, zero)
    assert [v.pair for v in violations] == [(0, 1)]
    assert violations[0].gap == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("q", [2.0, 3.0])
def test_generated_constraints_match_brute_force(seed, q, make_field):
    space = random_space(seed, 5)
    f = make_field(space, seed)
    generated = min_upper_gradient(f, q)
    oracle = brute_force_min_upper_gradient(f, q)
    assert generated.value == pytest.approx(oracle.value, rel=1e-7, abs=1e-9)
    assert not upper_gradient_violations(f, generated.g, tol=1e-8)


def test_brute_force_size_limit():
    space = path_graph(9)
    with pytest.raises(ValueError, match="limited"):
        brute_force_min_upper_gradient(ScalarField(space, np.zeros(9)), 2.0)


@pytest.mark.parametrize("seed", range(5))
def test_min_upper_gradient_below_slope(seed, make_field):
    space = random_space(seed, 7)
    f = make_field(space, seed)
    report = slope_feasibility_check(f, 2.0)
    assert report.passed, report.details
    assert homogeneity_ug_check(f, 2.0).passed


def test_stability_of_feasible_pairs(p3):
    f = ScalarField(p3, [0.0, 0.5, 1.0])
    g = discrete_slope(f)
    f_seq = [ScalarField(p3, f.values * (1 - 1 / k)) for k in range(2, 6)]
    g_seq = [discrete_slope(fk) for fk in f_seq]
    report = stability_check(f_seq, g_seq, f, g)
    assert report.passed
    assert not report.details.get("vacuous", False)


def test_modulus_monotone_under_inclusion():
    space = random_space(3, 8)
    smaller = random_family(space, 3, size=3)
    larger = random_family(space, 3, size=5)
    assert smaller.keys <= larger.keys
    assert modulus_monotonicity_check(smaller, larger, 2.0).passed


def test_single_atom_plan_compression(x2):
    plan = DiscreteTestPlan([(DiscretePath(x2, [0, 1]), 1.0)])
    assert plan_compression(plan) == pytest.approx(1.0)
    assert plan.energy(2.0) == pytest.approx(1.0)


def test_plan_weights_must_sum_to_one(x2):
    with pytest.raises(ValueError, match="sum"):
        DiscreteTestPlan([(DiscretePath(x2, [0, 1]), 0.5)])


def test_two_point_plan_modulus_inequality(x2):
    # plan(family) = 1, C = 1, Mod = 2, energy = 1
    path = DiscretePath(x2, [0, 1])
    plan = DiscreteTestPlan([(path, 1.0)])
    report = plan_modulus_inequality(plan, PathFamily([path.reversed()]), 2.0)
    assert report.passed
    assert report.details["lhs"] == 1.0
    assert report.details["rhs"] == pytest.approx(np.sqrt(2.0), abs=1e-8)


@pytest.mark.parametrize("seed", range(6))
def test_random_plan_modulus_inequality(seed):
    space = random_space(seed, 7)
    plan = random_plan(space, seed)
    family = random_family(space, seed, base=plan)
    for q in (1.5, 2.0, 3.0):
        assert plan_modulus_inequality(plan, family, q).passed


@pytest.mark.parametrize("seed", range(3))
def test_min_upper_gradient_is_weak_upper_gradient(seed, make_field):
    space = random_space(seed, 6)
    f = make_field(space, seed)
    g = min_upper_gradient(f, 2.0).g
    plans = [random_plan(space, seed), random_plan(space, seed + 100)]
    assert weak_ug_check(f, g, plans, tol=1e-8).passed


def test_plan_and_family_json(triangle):
    plan = random_plan(triangle, 1, atoms=2, max_edges=2)
    restored = plan_from_json(triangle, plan_to_json(plan))
    assert [p.vertices for p, _ in restored.atoms] == [p.vertices for p, _ in plan.atoms]
    family = random_family(triangle, 1)
    assert family_from_json(triangle, family_to_json(family)).keys == family.keys
