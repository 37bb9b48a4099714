"""
Cheeger q-energy, its proximal step and the implicit-Euler gradient flow
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import pandas as pd

from config import (
    DEFAULT_TAU_FACTOR,
    FEASIBILITY_TOL,
    HALVING_TAUS,
    IBP_TOL,
    INNER_TOL,
    MASS_TOL,
    MAX_PRINCIPLE_TOL,
    MIN_ORDER,
    ORDER_HORIZON_STEPS,
    ORDER_LAYER_STEPS,
    NEWTON_MAX_ITER,
    SMOOTHING_EPS,
)
from fields import ScalarField, discrete_slope, global_lipschitz
from optim import SolverError, projected_newton
from reporting import CheckReport, combine_reports

BREGMAN_FLOOR = 1e-14


@dataclass
class FlowConfig:
    q: float
    tau: float
    steps: int = 1
    inner_tol: float = INNER_TOL
    smoothing_eps: float = SMOOTHING_EPS

    def __post_init__(self):
        if self.q <= 1:
            raise ValueError(f"q must exceed 1, got {self.q}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.inner_tol <= 0:
            raise ValueError(f"inner_tol must be positive, got {self.inner_tol}")
        if self.steps < 0:
            raise ValueError(f"steps must be nonnegative, got {self.steps}")

    @property
    def p(self):
        return self.q / (self.q - 1)


def default_tau(f0, q, factor=DEFAULT_TAU_FACTOR):
    """factor * m_min / Lip(f0)^(q-1)"""
    lip = global_lipschitz(f0)
    m_min = float(f0.space.measure.min())
    if lip == 0:
        return factor * m_min
    return factor * m_min / lip ** (q - 1)


def cheeger_energy(f, q):
    """(1/q) sum m slope^q"""
    slope = discrete_slope(f).values
    return float(np.sum(f.space.measure * slope ** q) / q)


class _SlopeConstraints:
    """Rows B_k u = sigma (u_y - u_x) / w for every vertex x, neighbour y and sign sigma"""

    def __init__(self, space):
        rows, owners, keys = [], [], []
        for x in range(space.n):
            for y, w in space.neighbors(x):
                for sign in (1.0, -1.0):
                    row = np.zeros(space.n)
                    row[x] = -sign / w
                    row[y] = sign / w
                    rows.append(row)
                    owners.append(x)
                    keys.append((x, y, sign))
        self.B = np.array(rows)
        self.E = np.zeros((len(keys), space.n))
        self.E[np.arange(len(keys)), owners] = 1.0
        self.keys = keys
        self.lengths = np.array([space.edge_length(x, y) for x, y, _ in keys])


@dataclass
class ProxSolution:
    u: ScalarField
    multipliers: np.ndarray
    velocity: np.ndarray
    gap: float
    kkt: dict
    keys: list


def _primal_value(u, f, tau, q):
    m = f.space.measure
    return cheeger_energy(u, q) + float(np.sum(m * (u.values - f.values) ** 2)) / (2 * tau)


def _initial_multipliers(f, q, constraints):
    m = f.space.measure
    slope = discrete_slope(f).values
    bf = constraints.B @ f.values
    owners = [x for x, _, _ in constraints.keys]
    mu = np.zeros(len(constraints.keys))
    taken = set()
    for k, x in enumerate(owners):
        if x not in taken and slope[x] > 0 and bf[k] >= slope[x] * (1 - 1e-12):
            mu[k] = m[x] * slope[x] ** (q - 1)
            taken.add(x)
    return mu


def prox_solve(f, config, constraints=None, mu0=None):
    """Minimizer of C_q(u) + (1/2 tau) sum m (u - f)^2, solved on its Lagrange dual.

    The dual variables mu_k >= 0 price the slope constraints s_x >= B_k u; the
    primal point is u = f - tau r / m with r = B^T mu, so total mass is kept
    exactly, and the returned gap is primal minus dual value.
    """
    space = f.space
    q, tau = config.q, config.tau
    p = config.p
    m = space.measure
    constraints = constraints or _SlopeConstraints(space)
    B, E = constraints.B, constraints.E
    bf = B @ f.values
    eps = config.smoothing_eps

    def recover(mu):
        r = B.T @ mu
        mass = E.T @ mu
        return r, mass

    def objective(mu):
        r, mass = recover(mu)
        ratio = mass / m
        value = -bf @ mu + tau / 2 * np.sum(r ** 2 / m) + np.sum(m * ratio ** p) / p
        u = f.values - tau * r / m
        grad = -B @ u + E @ ratio ** (p - 1)
        curvature = (p - 1) * np.maximum(ratio, eps) ** (p - 2) / m
        hess = tau * (B / m) @ B.T + (E * curvature) @ E.T
        return value, grad, hess

    scale = 1.0 + float(discrete_slope(f).values.max(initial=0.0))
    if mu0 is None:
        mu0 = _initial_multipliers(f, q, constraints)
    try:
        result = projected_newton(objective, mu0, tol=config.inner_tol * scale,
                                  stall_tol=FEASIBILITY_TOL * scale, max_iter=NEWTON_MAX_ITER)
    except SolverError as e:
        raise SolverError(f"prox step did not converge: {e}", {**e.diagnostics, "tau": tau, "q": q}) from e

    mu = result.x
    r, _ = recover(mu)
    u = ScalarField(space, f.values - tau * r / m)
    _, grad, _ = objective(mu)
    gap = _primal_value(u, f, tau, q) + result.value
    kkt = {
        "projected_gradient": result.projected_gradient,
        "complementarity": float(np.max(np.abs(mu * grad), initial=0.0)),
        "iterations": result.iterations,
    }
    return ProxSolution(u, mu, -r / m, float(gap), kkt, constraints.keys)


def prox_step(f, config):
    return prox_solve(f, config).u


@dataclass
class FlowStep:
    index: int
    before: ScalarField
    after: ScalarField
    velocity: np.ndarray
    tau: float
    gap: Optional[float] = None
    multipliers: Optional[np.ndarray] = None
    active_pattern: tuple = ()


def active_pattern(u):
    """Neighbour realizing the slope at each vertex, -1 where the slope vanishes"""
    space = u.space
    slope = discrete_slope(u).values
    pattern = []
    for x in range(space.n):
        if slope[x] == 0:
            pattern.append(-1)
            continue
        best = max(space.neighbors(x), key=lambda nb: (abs(u.values[nb[0]] - u.values[x]) / nb[1], -nb[0]))
        pattern.append(best[0])
    return tuple(pattern)


@dataclass
class FlowTrace:
    space: object
    q: float
    tau: float
    times: List[float]
    fields: List[ScalarField]
    energies: List[float]
    laplacians: List[np.ndarray] = field(default_factory=list)
    steps: List[FlowStep] = field(default_factory=list)

    @property
    def masses(self):
        return [float(np.sum(self.space.measure * f.values)) for f in self.fields]


def gradient_flow(f0, config):
    """Iterated prox steps from f0; the velocity (f_{k+1} - f_k)/tau stands for the q-Laplacian"""
    constraints = _SlopeConstraints(f0.space)
    times, fields, energies = [0.0], [f0], [cheeger_energy(f0, config.q)]
    laplacians, steps = [], []
    current, mu = f0, None
    for k in range(config.steps):
        solution = prox_solve(current, config, constraints, mu)
        mu = solution.multipliers
        step = FlowStep(k, current, solution.u, solution.velocity, config.tau, solution.gap, mu,
                        active_pattern(solution.u))
        steps.append(step)
        laplacians.append(solution.velocity)
        current = solution.u
        times.append((k + 1) * config.tau)
        fields.append(current)
        energies.append(cheeger_energy(current, config.q))
        logging.debug(f"Flow step {k + 1}/{config.steps}: energy={energies[-1]:.12e} gap={solution.gap:.3e}")
    logging.info(f"Gradient flow finished: {config.steps} steps, energy {energies[0]:.6e} -> {energies[-1]:.6e}")
    return FlowTrace(f0.space, config.q, config.tau, times, fields, energies, laplacians, steps)


def integration_by_parts_check(step, g, q, tol=IBP_TOL):
    """-sum m g v <= sum m slope(g) slope(f)^(q-1) at the implicit point f = f_{k+1}"""
    m = step.after.space.measure
    lhs = -float(np.sum(m * g.values * step.velocity))
    rhs = float(np.sum(m * discrete_slope(g).values * discrete_slope(step.after).values ** (q - 1)))
    scale = 1.0 + float(np.sum(m * np.abs(g.values * step.velocity))) + abs(rhs)
    return CheckReport("integration_by_parts", lhs <= rhs + tol * scale, lhs - rhs, tol * scale,
                       {"lhs": lhs, "rhs": rhs, "step": step.index})


def equality_branch_check(step, phi, q, tol=IBP_TOL):
    """With g = phi(f), phi nondecreasing, both sides of integration by parts agree"""
    g = ScalarField(step.after.space, [phi(v) for v in step.after.values])
    report = integration_by_parts_check(step, g, q, tol)
    gap = abs(report.details["rhs"] - report.details["lhs"])
    return CheckReport("ibp_equality", gap <= report.tolerance, gap, report.tolerance, report.details)


@dataclass(frozen=True)
class ConvexProfile:
    name: str
    phi: Callable
    dphi: Callable
    ddphi: Callable
    positive: bool = True

    def total(self, f):
        return float(np.sum(f.space.measure * self.phi(f.values)))


def parse_profile(spec):
    """'power:a' (z^a, a > 1), 'entropy' (z log z) or 'dual:p' (the profile with phi'' = z^(1-p))"""
    name, _, arg = spec.partition(":")
    if name == "power":
        a = float(arg)
        if a <= 1:
            raise ValueError(f"power profile needs a > 1, got {a}")
        return ConvexProfile(spec, lambda z: np.power(z, a), lambda z: a * np.power(z, a - 1),
                             lambda z: a * (a - 1) * np.power(z, a - 2), positive=not float(a).is_integer())
    if name == "entropy":
        return ConvexProfile(spec, lambda z: z * np.log(z), lambda z: np.log(z) + 1, lambda z: 1 / z)
    if name == "dual":
        p = float(arg)
        if p <= 1:
            raise ValueError(f"dual profile needs p > 1, got {p}")
        if p == 2:
            return ConvexProfile(spec, lambda z: z * np.log(z), lambda z: np.log(z) + 1, lambda z: 1 / z)
        if p == 3:
            return ConvexProfile(spec, lambda z: -np.log(z), lambda z: -1 / z, lambda z: z ** -2.0)
        return ConvexProfile(
            spec,
            lambda z: np.power(z, 3 - p) / ((2 - p) * (3 - p)),
            lambda z: np.power(z, 2 - p) / (2 - p),
            lambda z: np.power(z, 1 - p),
        )
    raise ValueError(f"unknown profile: {spec}")


def flow_properties_check(trace, profile, mass_tol=MASS_TOL, max_tol=MAX_PRINCIPLE_TOL, inner_tol=INNER_TOL,
                          band_tol=IBP_TOL):
    """Mass preservation, maximum principle, energy decay and entropy dissipation along a trace.

    The entropy part asserts, per step, that the first-order drop
    sum m phi'(f_{k+1}) (f_k - f_{k+1}) lies in the band [lo, hi] * tau sum m slope^q,
    lo and hi bounding phi'' over the range of f_{k+1}. The pointwise rate
    tau sum m phi''(f_{k+1}) slope^q lies in the same band, so the drop matches
    it up to (hi - lo) tau sum m slope^q plus the O(tau^2) Bregman remainder.
    """
    f0 = trace.fields[0]
    if profile.positive and f0.values.min() <= 0:
        raise ValueError(f"profile {profile.name} needs a positive initial density")
    m = trace.space.measure
    masses = np.array(trace.masses)
    mass_drift = float(np.max(np.abs(masses - masses[0])))
    stack = np.array([f.values for f in trace.fields])
    overshoot = float(max(np.max(stack - f0.values.max()), np.max(f0.values.min() - stack)))
    energies = np.array(trace.energies)
    energy_rise = float(np.max(np.diff(energies), initial=0.0))
    energy_tol = inner_tol * (1.0 + energies[0])

    bregman, mesh_gaps, outside = [], [], []
    for step in trace.steps:
        f, u = step.before.values, step.after.values
        drop = profile.total(step.before) - profile.total(step.after)
        rate = float(np.sum(m * profile.dphi(u) * (f - u)))
        weighted = m * discrete_slope(step.after).values ** trace.q
        dissipation = step.tau * float(np.sum(weighted))
        pointwise = step.tau * float(np.sum(profile.ddphi(u) * weighted))
        curvature = profile.ddphi(np.array([u.min(), u.max()]))
        lo, hi = float(curvature.min()), float(curvature.max())
        shortfall = max(lo * dissipation - rate, rate - hi * dissipation)
        outside.append(shortfall / (1.0 + abs(rate) + dissipation))
        bregman.append(drop - rate)
        mesh_gaps.append(abs(drop - pointwise))
    worst = float(max(outside, default=0.0))

    reports = [
        CheckReport("mass", mass_drift <= mass_tol, mass_drift, mass_tol),
        CheckReport("maximum_principle", overshoot <= max_tol, overshoot, max_tol),
        CheckReport("energy_monotone", energy_rise <= energy_tol, energy_rise, energy_tol),
        CheckReport("entropy_dissipation", worst <= band_tol, worst, band_tol,
                    {"bregman_total": float(sum(bregman)), "mesh_gap_max": float(max(mesh_gaps, default=0.0))}),
    ]
    return combine_reports("flow_properties", reports, profile=profile.name, steps=len(trace.steps))


def dissipation_residual(f0, q, tau, horizon, profile, layer=0.0):
    """Sum of the per-step Bregman residual of the entropy identity over the steps in (layer, horizon]"""
    steps = max(1, int(round(horizon / tau)))
    skip = min(steps - 1, int(round(layer / tau)))
    trace = gradient_flow(f0, FlowConfig(q, tau, steps))
    m = f0.space.measure
    total = 0.0
    for step in trace.steps[skip:]:
        f, u = step.before.values, step.after.values
        total += profile.total(step.before) - profile.total(step.after) - float(np.sum(m * profile.dphi(u) * (f - u)))
    return total


def dissipation_order_check(f0, q, profile, taus=HALVING_TAUS, horizon=None, layer=None, min_order=MIN_ORDER):
    """The entropy residual over a fixed window shrinks at least like tau^min_order under halving.

    The window starts after an initial layer of ORDER_LAYER_STEPS coarse steps.
    Inside the layer the fast modes of f0 decay within a single implicit step
    whatever tau is, so their share of the residual does not shrink with tau.
    """
    taus = sorted(taus, reverse=True)
    horizon = horizon if horizon is not None else ORDER_HORIZON_STEPS * taus[0]
    layer = layer if layer is not None else ORDER_LAYER_STEPS * taus[0]
    if not 0 <= layer < horizon:
        raise ValueError(f"layer {layer} must lie in [0, horizon={horizon})")
    residuals = [dissipation_residual(f0, q, tau, horizon, profile, layer) for tau in taus]
    details = {"taus": taus, "residuals": residuals, "horizon": horizon, "layer": layer}
    if residuals[0] <= BREGMAN_FLOOR * (1.0 + abs(profile.total(f0))):
        return CheckReport("dissipation_order", True, 0.0, min_order, {**details, "vacuous": True})
    orders = [float(np.log2(a / b)) if b > 0 else float("inf") for a, b in zip(residuals[:-1], residuals[1:])]
    worst = min(orders)
    details["orders"] = orders
    # residual is the shortfall below the required order
    return CheckReport("dissipation_order", worst >= min_order, min_order - worst, 0.0, details)


def homogeneity_check(f0, config, factor=2.0, tol=1e-7):
    """Flow of c f0 with step tau equals c times the flow of f0 with step c^(q-2) tau"""
    q = config.q
    scaled = gradient_flow(f0.scaled(factor), config)
    rescaled_config = FlowConfig(q, config.tau * factor ** (q - 2), config.steps, config.inner_tol,
                                 config.smoothing_eps)
    base = gradient_flow(f0, rescaled_config)
    worst = max(
        float(np.max(np.abs(a.values - factor * b.values))) for a, b in zip(scaled.fields, base.fields)
    )
    worst /= 1.0 + factor * float(np.max(np.abs(f0.values)))
    return CheckReport("homogeneity", worst <= tol, worst, tol, {"factor": factor, "steps": config.steps})


def trace_to_frame(trace, profile=None):
    """One row per time: summary columns plus one density column per node"""
    rows = []
    for time, f, energy in zip(trace.times, trace.fields, trace.energies):
        row = {
            "time": time,
            "energy": energy,
            "mass": float(np.sum(trace.space.measure * f.values)),
            "min": float(f.values.min()),
            "max": float(f.values.max()),
            "entropy": profile.total(f) if profile is not None else np.nan,
        }
        row.update({f"f_{node_id}": float(v) for node_id, v in zip(trace.space.ids, f.values)})
        rows.append(row)
    return pd.DataFrame(rows)


def trace_from_frame(frame, space, q):
    """Rebuild a trace written by trace_to_frame; velocities come from differences"""
    columns = [f"f_{node_id}" for node_id in space.ids]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ValueError(f"trace is missing density columns {missing}")
    times = frame["time"].astype(float).tolist()
    if len(times) < 2:
        raise ValueError("trace needs at least two time rows")
    tau = times[1] - times[0]
    fields = [ScalarField(space, row) for row in frame[columns].to_numpy(dtype=float)]
    steps, laplacians = [], []
    for k, (before, after) in enumerate(zip(fields[:-1], fields[1:])):
        velocity = (after.values - before.values) / tau
        laplacians.append(velocity)
        steps.append(FlowStep(k, before, after, velocity, tau))
    energies = [cheeger_energy(f, q) for f in fields]
    return FlowTrace(space, q, tau, times, fields, energies, laplacians, steps)
