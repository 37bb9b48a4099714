"""
Hopf-Lax semigroup Q_t f on a finite space and the checks built on it
"""

import logging
from dataclasses import dataclass

import numpy as np

from config import (
    ARGMIN_TOL,
    DEFAULT_TIME_POINTS,
    DERIVATIVE_ABS_TOL,
    DERIVATIVE_REL_TOL,
    FD_RELATIVE_STEP,
    HJ_TOL,
    KINK_GAP,
    KINK_MARGINAL_FACTOR,
    TIME_RANGE,
)
from fields import ScalarField, discrete_slope, global_lipschitz
from reporting import CheckReport, combine_reports

ROUNDING_TOL = 1e-12


def dual_exponent(p):
    if p <= 1:
        raise ValueError(f"exponent must exceed 1, got {p}")
    return p / (p - 1)


@dataclass
class HopfLaxEvaluation:
    t: float
    p: float
    q_values: ScalarField
    d_minus: np.ndarray
    d_plus: np.ndarray
    argmin_sets: tuple

    @property
    def kink_gap(self):
        return self.d_plus - self.d_minus


def hopf_lax(f, t, p, argmin_tol=ARGMIN_TOL):
    """Q_t f(x) = min_y f(y) + d(x, y)^p / (p t^(p-1)), with the argmin radii D-, D+"""
    dual_exponent(p)
    space = f.space
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    if t == 0:
        zeros = np.zeros(space.n)
        return HopfLaxEvaluation(0.0, p, f, zeros, zeros.copy(), tuple((x,) for x in range(space.n)))

    cost = f.values[None, :] + space.dist ** p / (p * t ** (p - 1))
    q_values = cost.min(axis=1)
    near = cost <= q_values[:, None] + argmin_tol * (1.0 + np.abs(q_values[:, None]))
    radii = np.where(near, space.dist, np.nan)
    d_minus = np.nanmin(radii, axis=1)
    d_plus = np.nanmax(radii, axis=1)
    argmin_sets = tuple(tuple(np.flatnonzero(row)) for row in near)
    return HopfLaxEvaluation(float(t), p, ScalarField(space, q_values), d_minus, d_plus, argmin_sets)


def default_time_grid(f, p, points=DEFAULT_TIME_POINTS, time_range=TIME_RANGE):
    """Log-spaced times over time_range scaled by diam / (p Lip f)^(1/(p-1))"""
    lip = global_lipschitz(f)
    scale = f.space.diameter / (p * lip) ** (1 / (p - 1)) if lip > 0 else 1.0
    return np.geomspace(time_range[0] * scale, time_range[1] * scale, points)


def _grid(time_grid):
    grid = np.asarray(time_grid, dtype=float)
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must be positive and strictly increasing")
    return grid


def dpm_monotonicity_check(f, p, time_grid, tol=ROUNDING_TOL):
    """D+(x, t) <= D-(x, s) for every pair of grid times t < s"""
    grid = _grid(time_grid)
    if len(grid) < 2:
        return CheckReport("dpm_monotonicity", True, 0.0, tol, {"vacuous": True})
    evaluations = [hopf_lax(f, t, p) for t in grid]
    d_plus = np.array([e.d_plus for e in evaluations])
    d_minus = np.array([e.d_minus for e in evaluations])

    # running max of D+ over earlier times against D- at each later time
    earlier_max = np.maximum.accumulate(d_plus, axis=0)[:-1]
    excess = earlier_max - d_minus[1:]
    worst = float(excess.max())
    details = {"times": len(grid), "violations": int(np.sum(excess > tol))}
    if worst > tol:
        k, x = np.unravel_index(excess.argmax(), excess.shape)
        details["witness"] = {"x": f.space.ids[x], "s": float(grid[k + 1])}
    return CheckReport("dpm_monotonicity", worst <= tol, worst, tol, details)


def _derivative_tolerance(f, t, exact):
    return DERIVATIVE_REL_TOL * abs(exact) + DERIVATIVE_ABS_TOL * (1.0 + float(np.max(np.abs(f.values)))) / t


class _DerivativeStencil:
    """Hopf-Lax evaluations at t and t +- h shared by every point"""

    def __init__(self, f, p, t, step=FD_RELATIVE_STEP):
        self.f = f
        self.p = p
        self.q = dual_exponent(p)
        self.t = float(t)
        self.h = step * self.t
        self.center = hopf_lax(f, self.t, p)
        self.before = hopf_lax(f, self.t - self.h, p)
        self.after = hopf_lax(f, self.t + self.h, p)
        self.fd = (self.after.q_values.values - self.before.q_values.values) / (2 * self.h)

    def exact(self, radius):
        return -(radius / self.t) ** self.p / self.q

    def is_kink(self, x):
        return self.center.d_plus[x] - self.center.d_minus[x] > KINK_GAP

    def straddles(self, x):
        """The stencil t +- h sees an argmin radius different from t"""
        c = self.center
        return any(
            abs(e.d_minus[x] - c.d_minus[x]) > KINK_GAP or abs(e.d_plus[x] - c.d_plus[x]) > KINK_GAP
            for e in (self.before, self.after)
        )

    def is_marginal(self, x):
        gap = self.center.d_plus[x] - self.center.d_minus[x]
        return KINK_GAP / KINK_MARGINAL_FACTOR < gap <= KINK_GAP * KINK_MARGINAL_FACTOR

    def report(self, x):
        exact_minus = self.exact(self.center.d_minus[x])
        exact_plus = self.exact(self.center.d_plus[x])
        details = {
            "x": self.f.space.ids[x],
            "t": self.t,
            "finite_difference": float(self.fd[x]),
            "exact_minus": float(exact_minus),
            "exact_plus": float(exact_plus),
        }
        if self.is_marginal(x):
            logging.warning(f"Kink gap at x={self.f.space.ids[x]}, t={self.t:.6g} is close to the threshold {KINK_GAP}")
            details["marginal"] = True
        if self.is_kink(x) or self.straddles(x):
            details["kink"] = True
            return CheckReport("time_derivative", True, 0.0, None, details)
        tol = _derivative_tolerance(self.f, self.t, exact_plus)
        residual = abs(self.fd[x] - exact_plus)
        return CheckReport("time_derivative", bool(residual <= tol), float(residual), tol, details)


def time_derivative_check(f, p, x, t, step=FD_RELATIVE_STEP):
    """Central difference of t -> Q_t f(x) against -(1/q)(D(x, t)/t)^p off kinks"""
    return _DerivativeStencil(f, p, t, step).report(x)


def dini_identity_check(f, p, time_grid, step=FD_RELATIVE_STEP):
    grid = _grid(time_grid)
    reports = []
    kinks = 0
    for t in grid:
        stencil = _DerivativeStencil(f, p, t, step)
        for x in range(f.space.n):
            report = stencil.report(x)
            kinks += int(report.details.get("kink", False))
            reports.append(report)
    return combine_reports("dini_identity", reports, kinks=kinks)


def hj_subsolution_check(f, p, time_grid, tol_factor=HJ_TOL, step=FD_RELATIVE_STEP):
    """d/dt Q_t f + slope(Q_t f)^q / q <= A(x, t) off kinks, plus the exact Lipschitz and two-point bounds.

    A(x, t) = (1/q)[max_{z~x} ((w(x,z) + max(D+(x), D+(z)))/t)^p - (D(x)/t)^p]
    bounds the neighbour slope of Q_t f through the two-point inequality.
    """
    grid = _grid(time_grid)
    space = f.space
    q = dual_exponent(p)
    lip = global_lipschitz(f)
    tol = tol_factor * (1 + p * lip) ** q

    worst_hj, worst_raw, hj_witness, skipped = -np.inf, -np.inf, None, 0
    worst_lip, worst_pair = -np.inf, -np.inf
    for t in grid:
        stencil = _DerivativeStencil(f, p, t, step)
        evaluation = stencil.center
        qt = evaluation.q_values
        slope = discrete_slope(qt).values

        for x in range(space.n):
            if stencil.is_kink(x) or stencil.straddles(x):
                skipped += 1
                continue
            reach = max(
                ((w + max(evaluation.d_plus[x], evaluation.d_plus[z])) / t) ** p
                for z, w in space.neighbors(x)
            ) if space.neighbors(x) else 0.0
            allowance = (reach - (evaluation.d_plus[x] / t) ** p) / q
            raw = stencil.fd[x] + slope[x] ** q / q
            residual = raw - allowance - _derivative_tolerance(f, t, stencil.exact(evaluation.d_plus[x]))
            worst_raw = max(worst_raw, raw)
            if residual > worst_hj:
                worst_hj, hj_witness = residual, {"x": space.ids[x], "t": float(t), "allowance": float(allowance)}

        lip_q = global_lipschitz(qt)
        worst_lip = max(worst_lip, lip_q - p * lip - ROUNDING_TOL * (1 + p * lip))

        diff = qt.values[:, None] - qt.values[None, :]  # [z, y] -> Q(z) - Q(y)
        d = space.dist
        bound = d * (d + evaluation.d_plus[None, :]) ** (p - 1) / t ** (p - 1)
        scale = 1 + np.abs(qt.values[:, None]) + np.abs(qt.values[None, :]) + bound
        worst_pair = max(worst_pair, float(np.max(diff - bound - ROUNDING_TOL * scale)))

    hj_residual = float(worst_hj) if hj_witness else 0.0
    hj = CheckReport("hj_residual", hj_residual <= tol, hj_residual, tol,
                     {"skipped": skipped, "worst_raw": float(worst_raw), "witness": hj_witness})
    lip_report = CheckReport("lipschitz_bound", bool(worst_lip <= 0), float(worst_lip), 0.0,
                             {"lip_f": lip, "p": p})
    pair_report = CheckReport("two_point_bound", bool(worst_pair <= 0), float(worst_pair), 0.0, {})
    parts = [hj, lip_report, pair_report]
    return combine_reports("hj_subsolution", parts, residuals={r.name: r.residual for r in parts})


def c_transform(psi, p):
    """psi^c(y) = min_x d(x, y)^p / p - psi(x), which is Q_1(-psi)"""
    return hopf_lax(ScalarField(psi.space, -psi.values), 1.0, p).q_values


def hopf_lax_invariants_check(f, p, time_grid, tol=ROUNDING_TOL):
    """Order, range, translation, D bound and semigroup comparison over a time grid"""
    grid = _grid(time_grid)
    space = f.space
    lip = global_lipschitz(f)
    f_scale = 1.0 + float(np.max(np.abs(f.values)))
    evaluations = [hopf_lax(f, t, p) for t in grid]
    q_stack = np.array([e.q_values.values for e in evaluations])

    reports = []
    below_f = float(np.max(q_stack - f.values[None, :]))
    reports.append(CheckReport("q_below_f", below_f <= tol * f_scale, below_f, tol * f_scale))
    above_min = float(np.max(f.values.min() - q_stack))
    reports.append(CheckReport("q_above_min", above_min <= tol * f_scale, above_min, tol * f_scale))
    increase = float(np.max(np.diff(q_stack, axis=0), initial=0.0))
    reports.append(CheckReport("q_monotone_in_t", increase <= tol * f_scale, increase, tol * f_scale))

    order = float(max(np.max(e.d_minus - e.d_plus) for e in evaluations))
    reports.append(CheckReport("d_minus_below_d_plus", order <= 0, order, 0.0))

    worst_bound = -np.inf
    for e in evaluations:
        bound = e.t * (p * lip) ** (1 / (p - 1))
        slack = (p * e.t ** (p - 1) * ARGMIN_TOL * f_scale) ** (1 / p)
        worst_bound = max(worst_bound, float(np.max(e.d_plus - bound - 1e-9 * bound - slack)))
    reports.append(CheckReport("d_plus_bound", worst_bound <= 0, worst_bound, 0.0))

    shifted = ScalarField(space, f.values + 1.0)
    translation = max(
        float(np.max(np.abs(hopf_lax(shifted, e.t, p).q_values.values - e.q_values.values - 1.0)))
        for e in evaluations
    )
    reports.append(CheckReport("translation", translation <= tol * f_scale, translation, tol * f_scale))

    worst_semigroup = -np.inf
    for s, t in zip(grid[:-1], grid[1:]):
        inner = hopf_lax(f, t, p).q_values
        composed = hopf_lax(inner, s, p).q_values.values
        joint = hopf_lax(f, s + t, p).q_values.values
        worst_semigroup = max(worst_semigroup, float(np.max(joint - composed)))
    if len(grid) > 1:
        reports.append(CheckReport("semigroup", worst_semigroup <= tol * f_scale, worst_semigroup, tol * f_scale))

    identity = float(np.max(np.abs(hopf_lax(f, 0.0, p).q_values.values - f.values)))
    reports.append(CheckReport("q_zero_identity", identity == 0.0, identity, 0.0))

    return combine_reports("hopf_lax_invariants", reports)
