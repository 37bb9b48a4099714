"""
Exact W_p on finite spaces, Kantorovich duality via Hopf-Lax, and the flow-to-transport bridge
"""

import json
import logging
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from config import (
    DENSITY_FLOOR,
    DUAL_ASCENT_ITERATIONS,
    DUAL_GAP_FACTOR,
    KUWADA_HALVINGS,
    KUWADA_SHRINK,
    KUWADA_SLACK,
    MARGINAL_TOL,
    WEAK_DUALITY_TOL,
)
from cheeger import FlowConfig, gradient_flow, parse_profile
from fields import ScalarField, discrete_slope
from hopflax import dual_exponent, hopf_lax
from modulus import min_upper_gradient
from optim import SolverError
from reporting import CheckReport, combine_reports

REDUCED_COST_TOL = 1e-12
CLOSURE_FRACTION = 10


class MeasureError(ValueError):
    pass


class ProbMeasure:
    """Point masses summing to one; density is mass / m"""

    def __init__(self, space, mass):
        mass = np.array(mass, dtype=float).reshape(-1)
        if mass.shape[0] != space.n:
            raise MeasureError(f"measure has {mass.shape[0]} entries, space has {space.n} points")
        if np.any(mass < 0) or not np.all(np.isfinite(mass)):
            raise MeasureError("masses must be finite and nonnegative")
        if abs(mass.sum() - 1.0) > 1e-12:
            raise MeasureError(f"masses sum to {mass.sum():.15g}, not 1")
        mass.setflags(write=False)
        self.space = space
        self.mass = mass

    @classmethod
    def from_density(cls, field):
        """Normalize f m to a probability measure"""
        weighted = field.space.measure * field.values
        total = weighted.sum()
        if total <= 0:
            raise MeasureError("density has no positive mass")
        return cls(field.space, weighted / total)

    @classmethod
    def dirac(cls, space, node_id):
        mass = np.zeros(space.n)
        mass[space.index(node_id)] = 1.0
        return cls(space, mass)

    @property
    def density(self):
        return self.mass / self.space.measure

    def __repr__(self):
        return f"ProbMeasure({np.array2string(self.mass, precision=4)})"


@dataclass
class Coupling:
    matrix: np.ndarray
    row_potentials: Optional[np.ndarray] = None
    column_potentials: Optional[np.ndarray] = None

    @property
    def support_size(self):
        return int(np.count_nonzero(self.matrix > 0))

    def marginal_error(self, mu, nu):
        return float(max(np.max(np.abs(self.matrix.sum(axis=1) - mu.mass)),
                         np.max(np.abs(self.matrix.sum(axis=0) - nu.mass))))


def _northwest_corner(supply, demand):
    """Staircase basis of exactly m + n - 1 cells, degenerate zeros included"""
    a, b = supply.astype(float).copy(), demand.astype(float).copy()
    m, n = len(a), len(b)
    flow = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        amount = min(a[i], b[j])
        flow[i, j] = amount
        basis.append((i, j))
        a[i] -= amount
        b[j] -= amount
        if i == m - 1 and j == n - 1:
            break
        if (a[i] <= b[j] and i < m - 1) or j == n - 1:
            i += 1
        else:
            j += 1
    return flow, basis


def _basis_tree(basis, m, n):
    adjacency = {node: [] for node in range(m + n)}
    for i, j in basis:
        adjacency[i].append(m + j)
        adjacency[m + j].append(i)
    return adjacency


def _potentials(cost, basis, m, n):
    """u_i + v_j = c_ij on basic cells, with u_0 = 0"""
    adjacency = _basis_tree(basis, m, n)
    u, v = np.full(m, np.nan), np.full(n, np.nan)
    u[0] = 0.0
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for other in adjacency[node]:
            if node < m:
                j = other - m
                if np.isnan(v[j]):
                    v[j] = cost[node, j] - u[node]
                    queue.append(other)
            else:
                i = other
                if np.isnan(u[i]):
                    u[i] = cost[i, node - m] - v[node - m]
                    queue.append(other)
    return u, v


def _tree_path(basis, m, n, start, goal):
    adjacency = _basis_tree(basis, m, n)
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for other in sorted(adjacency[node]):
            if other not in parent:
                parent[other] = node
                queue.append(other)
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]


def transportation_simplex(supply, demand, cost, max_pivots=None):
    """Exact transportation LP by the simplex method on the basis tree, with Bland's rule.

    Returns (total cost, flow, u, v) where u, v are optimal dual prices
    (u_i + v_j <= c_ij, with equality on basic cells).
    """
    m, n = len(supply), len(demand)
    flow, basis = _northwest_corner(supply, demand)
    tol = REDUCED_COST_TOL * (1.0 + float(np.max(np.abs(cost))))
    max_pivots = max_pivots or 50 * (m * n + 1)

    for pivot in range(max_pivots):
        u, v = _potentials(cost, basis, m, n)
        reduced = cost - u[:, None] - v[None, :]
        candidates = np.argwhere(reduced < -tol)
        if not len(candidates):
            logging.debug(f"Transportation simplex optimal after {pivot} pivots")
            return float(np.sum(flow * cost)), flow, u, v

        i, j = (int(c) for c in candidates[0])
        nodes = _tree_path(basis, m, n, i, m + j)
        cells = []
        for a, b in zip(nodes[:-1], nodes[1:]):
            cells.append((a, b - m) if a < m else (b, a - m))
        # cells alternate -, +, -, ... starting next to the entering cell
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(flow[c] for c in minus)
        leaving = min(c for c in minus if flow[c] == theta)

        flow[i, j] += theta
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[leaving] = 0.0
        basis.remove(leaving)
        basis.append((i, j))

    raise SolverError("transportation simplex exceeded its pivot budget", {"pivots": max_pivots})


def _check_marginals(mu, nu, tol=MARGINAL_TOL):
    if mu.space is not nu.space:
        raise MeasureError("measures live on different spaces")
    mismatch = abs(mu.mass.sum() - nu.mass.sum())
    if mismatch > tol:
        raise MeasureError(f"marginal mismatch {mismatch:.3e}")


def _complete_potentials(cost, rows, cols, u_s, v_s):
    """Extend support potentials to every point while keeping u_i + v_j <= c_ij"""
    n = cost.shape[0]
    v = np.empty(n)
    u = np.empty(n)
    v[cols] = v_s
    u[rows] = u_s
    outside_rows = np.setdiff1d(np.arange(n), rows)
    for i in outside_rows:
        u[i] = np.min(cost[i, cols] - v_s)
    outside_cols = np.setdiff1d(np.arange(n), cols)
    for j in outside_cols:
        v[j] = np.min(cost[:, j] - u)
    return u, v


def wasserstein_primal(mu, nu, p):
    """W_p and an optimal vertex coupling (cost d^p, potentials for that cost)"""
    dual_exponent(p)
    _check_marginals(mu, nu)
    space = mu.space
    cost = space.dist ** p
    rows = np.flatnonzero(mu.mass > 0)
    cols = np.flatnonzero(nu.mass > 0)
    total, flow, u_s, v_s = transportation_simplex(mu.mass[rows], nu.mass[cols], cost[np.ix_(rows, cols)])
    matrix = np.zeros((space.n, space.n))
    matrix[np.ix_(rows, cols)] = flow
    u, v = _complete_potentials(cost, rows, cols, u_s, v_s)
    value = max(total, 0.0) ** (1 / p)
    return value, Coupling(matrix, u, v)


@dataclass
class DualAscentConfig:
    iterations: int = DUAL_ASCENT_ITERATIONS
    step_scale: Optional[float] = None
    warm_start: bool = True


def dual_objective(psi, mu, nu, p):
    """int Q_1 psi dnu - int psi dmu"""
    q1 = hopf_lax(psi, 1.0, p).q_values.values
    return float(nu.mass @ q1 - mu.mass @ psi.values)


def _refine(psi, p):
    """c-concave replacement max_y (Q_1 psi(y) - d^p(x, y)/p); never lowers the dual value"""
    space = psi.space
    q1 = hopf_lax(psi, 1.0, p).q_values.values
    cost = space.dist ** p / p
    return ScalarField(space, np.max(q1[None, :] - cost, axis=1))


def wasserstein_dual(mu, nu, p, ascent_config=None):
    """Lower bound on W_p^p / p by supergradient ascent over psi"""
    config = ascent_config or DualAscentConfig()
    _check_marginals(mu, nu)
    space = mu.space
    cost = space.dist ** p / p
    step_scale = config.step_scale or float(cost.max()) or 1.0

    if config.warm_start:
        _, coupling = wasserstein_primal(mu, nu, p)
        psi = ScalarField(space, -coupling.row_potentials / p)
    else:
        psi = ScalarField(space, np.zeros(space.n))
    psi = _refine(psi, p)
    best_value, best_psi = dual_objective(psi, mu, nu, p), psi

    for k in range(1, config.iterations + 1):
        evaluation = hopf_lax(psi, 1.0, p)
        supergradient = -mu.mass.copy()
        for y in range(space.n):
            if nu.mass[y] > 0:
                supergradient[evaluation.argmin_sets[y][0]] += nu.mass[y]
        norm = float(np.linalg.norm(supergradient))
        if norm == 0:
            break
        psi = _refine(ScalarField(space, psi.values + step_scale / np.sqrt(k) * supergradient / norm), p)
        value = dual_objective(psi, mu, nu, p)
        if value > best_value:
            best_value, best_psi = value, psi
    logging.debug(f"Dual ascent lower bound {best_value:.12e}")
    return best_value, best_psi


def duality_check(mu, nu, p, ascent_config=None, tol=WEAK_DUALITY_TOL, gap_factor=DUAL_GAP_FACTOR):
    """Weak duality always; the ascent closes the gap to gap_factor (1 + primal)"""
    primal, _ = wasserstein_primal(mu, nu, p)
    target = primal ** p / p
    bound, _ = wasserstein_dual(mu, nu, p, ascent_config)
    weak = CheckReport("weak_duality", bound <= target + tol, bound - target, tol,
                       {"dual": bound, "primal": target})
    gap_tol = gap_factor * (1.0 + target)
    gap = CheckReport("dual_gap", target - bound <= gap_tol, target - bound, gap_tol)
    return combine_reports("duality", [weak, gap])


def metric_axioms_check(measures, p, tol=MARGINAL_TOL):
    """Identity, symmetry and triangle inequality of W_p over a list of measures"""
    k = len(measures)
    table = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            table[a, b] = wasserstein_primal(measures[a], measures[b], p)[0]
    identity = float(np.max(np.abs(np.diag(table)), initial=0.0))
    symmetry = float(np.max(np.abs(table - table.T), initial=0.0))
    triangle = 0.0
    for a in range(k):
        for b in range(k):
            for c in range(k):
                triangle = max(triangle, table[a, c] - table[a, b] - table[b, c])
    scale = 1.0 + float(table.max(initial=0.0))
    reports = [
        CheckReport("w_identity", identity <= tol, identity, tol),
        CheckReport("w_symmetry", symmetry <= tol * scale, symmetry, tol * scale),
        CheckReport("w_triangle", triangle <= tol * scale, float(triangle), tol * scale),
    ]
    return combine_reports("w_metric", reports, measures=k)


def p_monotonicity_check(mu, nu, p, r, tol=MARGINAL_TOL):
    """W_p <= cost_p(optimal r-coupling)^(1/p), and W_p <= W_r on spaces of diameter <= 1"""
    if not p <= r:
        raise ValueError(f"need p <= r, got p={p}, r={r}")
    w_p, _ = wasserstein_primal(mu, nu, p)
    w_r, coupling_r = wasserstein_primal(mu, nu, r)
    cost_p = float(np.sum(coupling_r.matrix * mu.space.dist ** p)) ** (1 / p)
    reports = [CheckReport("w_p_coupling", w_p <= cost_p + tol, w_p - cost_p, tol)]
    if mu.space.diameter <= 1:
        reports.append(CheckReport("w_p_monotone", w_p <= w_r + tol, w_p - w_r, tol))
    return combine_reports("w_p_monotonicity", reports)


def _normalized(trace):
    total = float(np.sum(trace.space.measure * trace.fields[0].values))
    if total <= 0:
        raise MeasureError("trace carries no positive mass")
    densities = [f.values / total for f in trace.fields]
    floor = min(float(d.min()) for d in densities)
    if floor < DENSITY_FLOOR:
        raise MeasureError(f"density {floor:.3e} below the floor {DENSITY_FLOOR}")
    return total, densities


def _trace_measures(trace, densities):
    m = trace.space.measure
    return [ProbMeasure(trace.space, _renormalize(m * d)) for d in densities]


def _renormalize(mass):
    return mass / mass.sum()


def kuwada_check(trace, p, slack=KUWADA_SLACK):
    """W_p^p(mu_k, mu_{k+1}) <= (1 + slack) tau^p sum m slope^q / rho^(p-1) + A_k per step.

    A_k = (tau / Z) sum m slope(f_{k+1})^(q-1) l^(p-1), l the longest edge at each
    point, bounds the cost of moving the one-step edge flux on a fixed graph.
    """
    q = dual_exponent(p)
    if abs(q - trace.q) > 1e-12 * q:
        raise MeasureError(f"trace exponent q={trace.q} is not dual to p={p}")
    space = trace.space
    m = space.measure
    tau = trace.tau
    total, densities = _normalized(trace)
    measures = _trace_measures(trace, densities)
    longest = space.longest_incident_edge

    consumption, used, reports = [], [], []
    for k in range(len(trace.fields) - 1):
        lhs = wasserstein_primal(measures[k], measures[k + 1], p)[0] ** p
        after = ScalarField(space, densities[k + 1])
        slope = discrete_slope(after).values
        speed = tau ** p * float(np.sum(m * slope ** q / densities[k + 1] ** (p - 1)))
        raw_slope = discrete_slope(trace.fields[k + 1]).values
        allowance = tau / total * float(np.sum(m * raw_slope ** (q - 1) * longest ** (p - 1)))
        rhs = (1 + slack) * speed + allowance
        tol = 1e-10 * (1 + allowance)
        consumption.append(lhs / rhs if rhs > 0 else 0.0)
        used.append(max(0.0, lhs - (1 + slack) * speed))
        reports.append(CheckReport("kuwada_step", lhs <= rhs + tol, lhs - rhs, tol,
                                   {"step": k, "lhs": lhs, "speed": speed, "allowance": allowance}))
    result = combine_reports("kuwada", reports, slack_consumption=max(consumption, default=0.0),
                             allowance_used=max(used, default=0.0))
    logging.info(f"Kuwada check over {len(reports)} steps: worst slack consumption {max(consumption, default=0.0):.4f}")
    return result


def kuwada_halving_check(f0, p, tau, steps, halvings=KUWADA_HALVINGS, slack=KUWADA_SLACK, shrink=KUWADA_SHRINK,
                         trace=None):
    """The largest per-step draw on the edge-flux allowance shrinks under tau-halving.

    Flows run over the fixed horizon steps * tau; the draw of a step is
    W_p^p(mu_k, mu_{k+1}) - (1 + slack) * speed_k when positive. Each halving
    must cut the worst draw to at most shrink times the previous one.
    """
    q = dual_exponent(p)
    rows, draws = [], []
    for halving in range(halvings):
        h_tau = tau / 2 ** halving
        if halving == 0 and trace is not None:
            h_trace = trace
        else:
            h_trace = gradient_flow(f0, FlowConfig(q, h_tau, steps * 2 ** halving))
        kuwada = kuwada_check(h_trace, p, slack=slack)
        draws.append(kuwada.details["allowance_used"])
        rows.append({
            "tau": h_tau,
            "slack_consumption": kuwada.details["slack_consumption"],
            "allowance_used": kuwada.details["allowance_used"],
            "pass": kuwada.passed,
        })
    reports = []
    for coarse, fine in zip(draws[:-1], draws[1:]):
        tol = 1e-12 * (1 + coarse)
        reports.append(CheckReport("kuwada_shrink", fine <= shrink * coarse + tol, fine - shrink * coarse, tol,
                                   {"coarse": coarse, "fine": fine}))
    ratios = [fine / coarse if coarse > 0 else 0.0 for coarse, fine in zip(draws[:-1], draws[1:])]
    return combine_reports("kuwada_halving", reports, rows=rows, ratios=ratios)


def dissipation_bridge_check(trace, p, slack=KUWADA_SLACK, profile=None):
    """Entropy drop <= (1/q) sum tau sum m (phi''(rho_0) g_0)^q rho_k + (1/p) sum tau (W_p / tau)^p"""
    q = dual_exponent(p)
    if abs(q - trace.q) > 1e-12 * q:
        raise MeasureError(f"trace exponent q={trace.q} is not dual to p={p}")
    profile = profile or parse_profile(f"dual:{p:g}")
    space = trace.space
    m = space.measure
    tau = trace.tau
    _, densities = _normalized(trace)
    measures = _trace_measures(trace, densities)

    rho0 = ScalarField(space, densities[0])
    g0 = min_upper_gradient(rho0, q).g.values
    weight = (profile.ddphi(densities[0]) * g0) ** q

    lhs = profile.total(rho0) - profile.total(ScalarField(space, densities[-1]))
    gradient_term = sum(tau * float(np.sum(m * weight * d)) for d in densities[:-1]) / q
    speed_term = sum(
        tau * (wasserstein_primal(measures[k], measures[k + 1], p)[0] / tau) ** p
        for k in range(len(densities) - 1)
    ) / p
    rhs = gradient_term + speed_term
    tol = 1e-9
    details = {"lhs": lhs, "gradient_term": gradient_term, "speed_term": speed_term,
               "slack_used": lhs / rhs if rhs > 0 else 0.0}
    return CheckReport("dissipation_bridge", lhs <= (1 + slack) * rhs + tol, lhs - (1 + slack) * rhs, tol, details)


def chain_closure_check(trace, p, slack=KUWADA_SLACK):
    """Short-time average of sum m slope^q / rho^(p-1) against its value at t = 0.

    The same quantity with the minimal upper gradient of rho_0 is reported
    alongside; the two agree where slope and minimal upper gradient coincide.
    """
    q = dual_exponent(p)
    space = trace.space
    m = space.measure
    _, densities = _normalized(trace)
    if len(densities) < 2:
        return CheckReport("chain_closure", True, 0.0, 0.0, {"vacuous": True})
    window = max(1, (len(densities) - 1) // CLOSURE_FRACTION)

    def weighted(d):
        return float(np.sum(m * discrete_slope(ScalarField(space, d)).values ** q / d ** (p - 1)))

    average = float(np.mean([weighted(d) for d in densities[1:window + 1]]))
    initial = weighted(densities[0])
    g0 = min_upper_gradient(ScalarField(space, densities[0]), q).g.values
    relaxed = float(np.sum(m * g0 ** q / densities[0] ** (p - 1)))
    bound = (1 + slack) * initial
    tol = 1e-12 * (1 + initial)
    details = {
        "average": average,
        "initial": initial,
        "window": window,
        # the asserted bound uses the slope; the minimal upper gradient version is reported only
        "relaxation": "slope in place of the minimal upper gradient",
        "min_ug_initial": relaxed,
        "min_ug_margin": average - (1 + slack) * relaxed,
    }
    return CheckReport("chain_closure", average <= bound + tol, average - bound, tol, details)


def measure_from_json(space, doc):
    """Masses from {id: mass} or a plain list in node order"""
    if isinstance(doc, dict):
        return ProbMeasure(space, [float(doc.get(node_id, 0.0)) for node_id in space.ids])
    return ProbMeasure(space, doc)


def measure_to_json(measure):
    return {node_id: float(v) for node_id, v in zip(measure.space.ids, measure.mass)}


def load_measure(space, path):
    with open(path, "r") as f:
        return measure_from_json(space, json.load(f))
