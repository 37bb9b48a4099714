"""
q-modulus of path families, minimal q-upper gradients and discrete test plans
"""

import heapq
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from config import (
    BRUTE_FORCE_MAX_N,
    CERTIFIED_GAP_TOL,
    FEASIBILITY_TOL,
    KKT_TOL,
    MAX_OUTER_ROUNDS,
    ORACLE_TOL,
    PLAN_GRID_POINTS,
    SLACKNESS_TOL,
    UPPER_GRADIENT_TOL,
    WEAK_DUALITY_TOL,
)
from fields import DiscretePath, GradientField, discrete_slope, path_energy, path_integral, simple_paths
from optim import SolverError, solve_min_energy
from reporting import CheckReport, combine_reports

ACTIVE_TOL = 1e-8


class UpperGradientError(SolverError):
    def __init__(self, message, last_iterate=None, violations=None, diagnostics=None):
        super().__init__(message, diagnostics)
        self.last_iterate = last_iterate
        self.violations = violations or []


class PathFamily:
    """A finite family of edge paths, deduplicated up to orientation"""

    def __init__(self, paths):
        unique = {}
        for path in paths:
            unique.setdefault(path.canonical_key, path)
        self.paths = list(unique.values())

    def __len__(self):
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)

    def __contains__(self, path):
        return path.canonical_key in self.keys

    @property
    def keys(self):
        return {path.canonical_key for path in self.paths}

    def union(self, other):
        return PathFamily(self.paths + list(other))

    def constraint_matrix(self):
        return np.array([path.coefficients() for path in self.paths])


@dataclass
class ModulusSolution:
    rho: GradientField
    value: float
    active_paths: List[int]
    kkt_residual: float
    kkt: dict = field(default_factory=dict)


def modulus(family, q, space=None, tol=KKT_TOL):
    """Mod_q(family) = min sum m rho^q with trapezoid integral of rho >= 1 on each path.

    The empty family has modulus 0, attained by rho = 0.
    """
    if not isinstance(family, PathFamily):
        family = PathFamily(family)
    if not len(family):
        if space is None:
            raise ValueError("the space is needed to solve an empty family")
        return ModulusSolution(GradientField(space, np.zeros(space.n)), 0.0, [], 0.0, {})
    space = family.paths[0].space
    A = family.constraint_matrix()
    b = np.ones(len(family))
    solution = solve_min_energy(A, b, space.measure, q)

    integrals = A @ solution.rho
    active = [i for i, v in enumerate(integrals) if v - 1.0 <= ACTIVE_TOL]
    if solution.kkt_residual > tol or solution.kkt["slackness"] > SLACKNESS_TOL:
        logging.warning(f"Modulus solve finished with KKT residual {solution.kkt_residual:.3e}")
    logging.debug(f"Mod_{q} of {len(family)} paths = {solution.value:.12e}")
    return ModulusSolution(GradientField(space, solution.rho), solution.value, active,
                           solution.kkt_residual, solution.kkt)


@dataclass
class UpperGradientSolution:
    g: GradientField
    value: float
    generated_constraints: list
    iterations: int
    kkt: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Violation:
    pair: tuple
    path: DiscretePath
    g_distance: float
    gap: float


def _shortest_paths_from(space, costs, source):
    """Dijkstra from one source; ties broken by the lexicographically smallest vertex sequence"""
    best = {}
    heap = [(0.0, (source,))]
    while heap:
        dist, path = heapq.heappop(heap)
        node = path[-1]
        if node in best:
            continue
        best[node] = (dist, path)
        for neighbor, _ in space.neighbors(node):
            if neighbor not in best:
                heapq.heappush(heap, (dist + costs[(min(node, neighbor), max(node, neighbor))], path + (neighbor,)))
    return best


def upper_gradient_violations(f, g, tol=ORACLE_TOL):
    """Separation oracle: pairs whose g-shortest path falls short of |f(a) - f(b)|"""
    space = f.space
    costs = {
        (i, j): (g.values[i] + g.values[j]) / 2 * w
        for (i, j), w in space.edges.items()
    }
    violations = []
    for a in range(space.n):
        reached = _shortest_paths_from(space, costs, a)
        for b in range(a + 1, space.n):
            g_distance, vertices = reached[b]
            target = abs(f.values[b] - f.values[a])
            if g_distance < target - tol:
                violations.append(Violation((a, b), DiscretePath(space, vertices), g_distance, target - g_distance))
    return violations


def _initial_constraints(f):
    space = f.space
    paths = []
    for (i, j) in space.edges:
        if f.values[i] != f.values[j]:
            paths.append(DiscretePath(space, (i, j)))
    return paths


def _kkt_closed(solution, scale):
    if solution.kkt_residual <= KKT_TOL * scale:
        return True
    gap = solution.kkt.get("duality_gap", np.inf)
    return gap <= CERTIFIED_GAP_TOL * (1.0 + solution.value) and solution.kkt["infeasibility"] <= FEASIBILITY_TOL * scale


def _solve_constraints(f, paths, q):
    A = np.array([path.coefficients() for path in paths])
    b = np.array([abs(f.values[path.end] - f.values[path.start]) for path in paths])
    return solve_min_energy(A, b, f.space.measure, q)


def min_upper_gradient(f, q, max_rounds=MAX_OUTER_ROUNDS, tol=ORACLE_TOL):
    """Minimal q-upper gradient by constraint generation with a shortest-path oracle.

    Stops once the oracle finds no new violated path. Known paths may then
    fall short only by the solver feasibility tolerance and the last energy
    solve must have closed its KKT conditions, otherwise UpperGradientError
    carries the last iterate and the remaining violations.
    """
    space = f.space
    paths = _initial_constraints(f)
    if not paths:
        return UpperGradientSolution(GradientField(space, np.zeros(space.n)), 0.0, [], 0,
                                     {"stationarity": 0.0, "infeasibility": 0.0, "slackness": 0.0})

    known = {path.canonical_key for path in paths}
    scale = 1.0 + float(np.ptp(f.values))
    g = None
    for round_index in range(1, max_rounds + 1):
        solution = _solve_constraints(f, paths, q)
        g = GradientField(space, solution.rho)
        violations = upper_gradient_violations(f, g, tol)
        fresh = [v for v in violations if v.path.canonical_key not in known]
        logging.debug(f"Round {round_index}: {len(paths)} constraints, {len(fresh)} new violations")
        if not fresh:
            worst = max((v.gap for v in violations), default=0.0)
            if worst > FEASIBILITY_TOL * scale or not _kkt_closed(solution, scale):
                raise UpperGradientError(
                    f"constraint generation stalled with known paths still violated (worst gap {worst:.3e})",
                    last_iterate=g,
                    violations=[(v.pair, v.path.ids, v.gap) for v in violations],
                    diagnostics={"rounds": round_index, "constraints": len(paths), **solution.kkt},
                )
            kkt = dict(solution.kkt)
            kkt["max_violation"] = max((v.gap for v in violations), default=0.0)
            generated = [((space.ids[p.start], space.ids[p.end]), p.ids) for p in paths]
            logging.info(f"Minimal {q}-upper gradient found in {round_index} rounds, value {solution.value:.12e}")
            return UpperGradientSolution(g, solution.value, generated, round_index, kkt)
        for violation in fresh:
            known.add(violation.path.canonical_key)
            paths.append(violation.path)

    violations = upper_gradient_violations(f, g, tol)
    raise UpperGradientError(
        f"constraint generation did not close within {max_rounds} rounds",
        last_iterate=g,
        violations=[(v.pair, v.path.ids, v.gap) for v in violations],
        diagnostics={"rounds": max_rounds, "constraints": len(paths)},
    )


def brute_force_min_upper_gradient(f, q, max_n=BRUTE_FORCE_MAX_N):
    """Dense solve over every simple path; only for small spaces"""
    space = f.space
    if space.n > max_n:
        raise ValueError(f"brute force limited to n <= {max_n}, got {space.n}")
    paths = [path for path in simple_paths(space) if f.values[path.start] != f.values[path.end]]
    if not paths:
        return UpperGradientSolution(GradientField(space, np.zeros(space.n)), 0.0, [], 1, {})
    solution = _solve_constraints(f, paths, q)
    generated = [((space.ids[p.start], space.ids[p.end]), p.ids) for p in paths]
    return UpperGradientSolution(GradientField(space, solution.rho), solution.value, generated, 1, solution.kkt)


def slope_feasibility_check(f, q, solution=None, tol=FEASIBILITY_TOL):
    """min_upper_gradient value <= sum m slope^q, and the slope passes the oracle"""
    solution = solution or min_upper_gradient(f, q)
    slope = discrete_slope(f)
    slope_value = slope.energy(q)
    gap = solution.value - slope_value
    scale = 1.0 + slope_value
    oracle = upper_gradient_violations(f, slope, tol=FEASIBILITY_TOL * scale)
    reports = [
        CheckReport("ug_below_slope", gap <= tol * scale, float(gap), tol * scale,
                    {"min_ug": solution.value, "slope": slope_value}),
        CheckReport("slope_feasible", not oracle, float(max((v.gap for v in oracle), default=0.0)),
                    FEASIBILITY_TOL * scale),
    ]
    return combine_reports("slope_feasibility", reports)


def homogeneity_ug_check(f, q, factor=2.0, tol=1e-7):
    """min_upper_gradient(c f) = c g with value |c|^q times the value"""
    base = min_upper_gradient(f, q)
    scaled = min_upper_gradient(f.scaled(factor), q)
    value_gap = abs(scaled.value - abs(factor) ** q * base.value) / (1.0 + abs(factor) ** q * base.value)
    field_gap = float(np.max(np.abs(scaled.g.values - abs(factor) * base.g.values), initial=0.0))
    field_gap /= 1.0 + abs(factor) * float(np.max(base.g.values, initial=0.0))
    residual = max(value_gap, field_gap)
    return CheckReport("ug_homogeneity", residual <= tol, float(residual), tol, {"factor": factor})


def stability_check(f_seq, g_seq, f, g, tol=FEASIBILITY_TOL):
    """Feasible pairs (f_n, g_n) converging to (f, g) leave g feasible for f"""
    premise = [
        max((v.gap for v in upper_gradient_violations(fn, gn, tol)), default=0.0)
        for fn, gn in zip(f_seq, g_seq)
    ]
    premise_ok = all(gap <= tol for gap in premise)
    conclusion = max((v.gap for v in upper_gradient_violations(f, g, tol)), default=0.0)
    details = {"premise_holds": premise_ok, "terms": len(premise)}
    if len(f_seq):
        details["last_distance"] = float(np.max(np.abs(f_seq[-1].values - f.values))
                                         + np.max(np.abs(g_seq[-1].values - g.values)))
    if not premise_ok:
        return CheckReport("stability", True, 0.0, tol, {**details, "vacuous": True})
    return CheckReport("stability", conclusion <= tol, float(conclusion), tol, details)


@dataclass
class DiscreteTestPlan:
    """Finitely many weighted paths moved at constant speed"""
    atoms: list  # (DiscretePath, weight)
    time_grid: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, PLAN_GRID_POINTS))
    compression: Optional[float] = None

    def __post_init__(self):
        if not self.atoms:
            raise ValueError("a test plan needs at least one atom")
        weights = np.array([w for _, w in self.atoms], dtype=float)
        if np.any(weights <= 0):
            raise ValueError("atom weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"atom weights sum to {weights.sum()}, not 1")
        self.time_grid = np.asarray(self.time_grid, dtype=float)

    @property
    def space(self):
        return self.atoms[0][0].space

    def energy(self, p):
        """Sum of weight * length^p"""
        return float(sum(w * path_energy(path, p) for path, w in self.atoms))


def snap(path, t):
    """Nearest vertex of the path at time t; ties go to the earlier vertex"""
    position = t * path.length
    k = int(np.argmin(np.abs(path.cumulative - position)))
    return path.vertices[k]


def _evaluation_times(plan):
    breaks = {0.0, 1.0}
    for path, _ in plan.atoms:
        marks = path.breakpoints
        breaks.update(((marks[:-1] + marks[1:]) / 2).tolist())
    breaks = np.array(sorted(breaks))
    midpoints = (breaks[:-1] + breaks[1:]) / 2
    return np.unique(np.concatenate([plan.time_grid, midpoints]))


def plan_compression(plan, space=None):
    """Smallest C with (e_t)_# plan <= C m for every t; stored back into the plan"""
    space = space or plan.space
    worst = 0.0
    for t in _evaluation_times(plan):
        marginal = np.zeros(space.n)
        for path, weight in plan.atoms:
            marginal[snap(path, t)] += weight
        worst = max(worst, float(np.max(marginal / space.measure)))
    plan.compression = worst
    return worst


def weak_ug_check(f, g, plans, tol=UPPER_GRADIENT_TOL):
    """Every atom of every plan satisfies |f(end) - f(start)| <= integral of g"""
    worst, count = -np.inf, 0
    for plan in plans:
        for path, _ in plan.atoms:
            count += 1
            worst = max(worst, abs(f.values[path.end] - f.values[path.start]) - path_integral(g, path))
    if not count:
        return CheckReport("weak_upper_gradient", True, 0.0, tol, {"vacuous": True})
    return CheckReport("weak_upper_gradient", bool(worst <= tol), float(worst), tol, {"atoms": count})


def plan_modulus_inequality(plan, family, q, tol=WEAK_DUALITY_TOL):
    """plan(family) <= C^(1/q) Mod_q(family)^(1/q) (sum weight length^p)^(1/p)"""
    if not isinstance(family, PathFamily):
        family = PathFamily(family)
    p = q / (q - 1)
    keys = family.keys
    lhs = float(sum(w for path, w in plan.atoms if path.canonical_key in keys))
    compression = plan_compression(plan)
    mod = modulus(family, q).value if len(family) else 0.0
    energy = plan.energy(p)
    rhs = compression ** (1 / q) * mod ** (1 / q) * energy ** (1 / p)
    details = {"lhs": lhs, "rhs": rhs, "compression": compression, "modulus": mod, "energy": energy}
    return CheckReport("plan_modulus", lhs <= rhs + tol, float(lhs - rhs), tol, details)


def modulus_monotonicity_check(smaller, larger, q, tol=WEAK_DUALITY_TOL):
    """Mod_q(smaller) <= Mod_q(larger) when smaller is a subfamily"""
    small = modulus(smaller, q).value
    large = modulus(larger, q).value
    return CheckReport("modulus_monotone", small <= large + tol, float(small - large), tol,
                       {"smaller": small, "larger": large})


def _random_walk(space, rng, max_edges):
    start = int(rng.integers(space.n))
    vertices = [start]
    for _ in range(int(rng.integers(1, max_edges + 1))):
        options = [y for y, _ in space.neighbors(vertices[-1]) if y not in vertices]
        if not options:
            break
        vertices.append(int(options[rng.integers(len(options))]))
    if len(vertices) < 2:
        vertices.append(space.neighbors(start)[0][0])
    return DiscretePath(space, vertices)


def random_plan(space, seed, atoms=4, max_edges=4, grid_points=PLAN_GRID_POINTS):
    """Seeded plan of simple random-walk paths with Dirichlet weights"""
    rng = np.random.default_rng([int(seed), 17])
    paths = [_random_walk(space, rng, max_edges) for _ in range(atoms)]
    weights = rng.dirichlet(np.ones(atoms))
    weights = weights / weights.sum()
    return DiscreteTestPlan(list(zip(paths, weights.tolist())), np.linspace(0.0, 1.0, grid_points))


def random_family(space, seed, size=3, max_edges=4, base=None):
    """Seeded family; with a base plan, each of its paths joins with probability 1/2"""
    rng = np.random.default_rng([int(seed), 29])
    paths = [_random_walk(space, rng, max_edges) for _ in range(size)]
    if base is not None:
        paths += [path for path, _ in base.atoms if rng.random() < 0.5]
    return PathFamily(paths)


def plan_to_json(plan):
    return {
        "atoms": [{"path": path.ids, "weight": float(w)} for path, w in plan.atoms],
        "time_grid": plan.time_grid.tolist(),
    }


def plan_from_json(space, doc):
    atoms = [(DiscretePath.from_ids(space, atom["path"]), float(atom["weight"])) for atom in doc["atoms"]]
    if "time_grid" in doc:
        return DiscreteTestPlan(atoms, np.asarray(doc["time_grid"], dtype=float))
    return DiscreteTestPlan(atoms)


def family_to_json(family):
    return {"paths": [path.ids for path in family]}


def family_from_json(space, doc):
    paths = doc["paths"] if isinstance(doc, dict) else doc
    return PathFamily([DiscretePath.from_ids(space, ids) for ids in paths])


def load_family(space, path):
    with open(path, "r") as f:
        return family_from_json(space, json.load(f))


def load_plan(space, path):
    with open(path, "r") as f:
        return plan_from_json(space, json.load(f))
