"""
Projected Newton on the nonnegative orthant and the energy program it serves
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

from config import (
    ARMIJO_BETA,
    ARMIJO_SIGMA,
    CERTIFIED_GAP_TOL,
    FEASIBILITY_TOL,
    NEWTON_MAX_ITER,
    NEWTON_TOL,
    SMOOTHING_EPS,
)

RIDGE = 1e-10
ACTIVE_EPS = 1e-3
MAX_BACKTRACKS = 60
VALUE_NOISE = 1e-13


class SolverError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class NewtonResult:
    x: np.ndarray
    value: float
    iterations: int
    projected_gradient: float
    converged: bool


def projected_gradient_norm(x, grad):
    pg = np.where(x > 0, grad, np.minimum(grad, 0.0))
    return float(np.max(np.abs(pg), initial=0.0))


def projected_newton(objective, x0, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER, stall_tol=None,
                     sigma=ARMIJO_SIGMA, beta=ARMIJO_BETA):
    """Minimize a smooth convex objective over x >= 0.

    objective(x) returns (value, gradient, hessian). Variables that sit at the
    bound with a positive gradient are moved by a scaled gradient step, the rest
    by a Newton step on the reduced Hessian; steps follow the projection arc
    with Armijo backtracking, or with a projected-gradient decrease once the
    objective no longer resolves the Armijo margin. Stagnation is accepted as
    convergence when the projected gradient is below stall_tol, otherwise
    SolverError is raised with the last iterate in its diagnostics.
    """
    stall_tol = np.sqrt(tol) if stall_tol is None else stall_tol
    x = np.maximum(np.asarray(x0, dtype=float), 0.0)
    value, grad, hess = objective(x)
    pg = projected_gradient_norm(x, grad)

    for iteration in range(1, max_iter + 1):
        if pg <= tol:
            return NewtonResult(x, value, iteration - 1, pg, True)

        eps_k = min(ACTIVE_EPS, float(np.linalg.norm(x - np.maximum(x - grad, 0.0))))
        active = (x <= eps_k) & (grad > 0)
        free = ~active

        direction = np.zeros_like(x)
        direction[active] = -grad[active] / max(1.0, float(np.max(np.diag(hess)[active], initial=1.0)))
        if free.any():
            h_free = hess[np.ix_(free, free)]
            h_free = h_free + RIDGE * (1.0 + np.abs(np.diag(h_free)).max()) * np.eye(h_free.shape[0])
            try:
                direction[free] = -np.linalg.solve(h_free, grad[free])
            except np.linalg.LinAlgError:
                direction[free] = -np.linalg.lstsq(h_free, grad[free], rcond=None)[0]
            if grad[free] @ direction[free] >= 0:
                direction[free] = -grad[free]

        alpha = 1.0
        accepted = False
        noise = VALUE_NOISE * (1.0 + abs(value))
        for _ in range(MAX_BACKTRACKS):
            candidate = np.maximum(x + alpha * direction, 0.0)
            new_value, new_grad, new_hess = objective(candidate)
            if not np.isfinite(new_value):
                alpha *= beta
                continue
            predicted = sigma * (-alpha * (grad[free] @ direction[free]) + grad[active] @ (x[active] - candidate[active]))
            if value - new_value >= predicted:
                accepted = True
                break
            # below the rounding floor of the objective the decrease test is noise;
            # fall back to the projected gradient as merit
            if new_value <= value + noise and projected_gradient_norm(candidate, new_grad) <= (1.0 - sigma) * pg:
                accepted = True
                break
            alpha *= beta

        if not accepted or np.array_equal(candidate, x):
            logging.debug(f"Projected Newton stalled at iteration {iteration} with projected gradient {pg:.3e}")
            if pg <= stall_tol:
                return NewtonResult(x, value, iteration, pg, True)
            raise SolverError(
                "projected Newton stalled",
                {"iterations": iteration, "projected_gradient": pg, "value": value, "x": x},
            )

        x, value, grad, hess = candidate, new_value, new_grad, new_hess
        pg = projected_gradient_norm(x, grad)
        logging.debug(f"Newton iteration {iteration}: value={value:.12e} projected_gradient={pg:.3e} step={alpha:.3g}")

    if pg <= stall_tol:
        return NewtonResult(x, value, max_iter, pg, pg <= tol)
    raise SolverError(
        f"projected Newton did not converge in {max_iter} iterations",
        {"iterations": max_iter, "projected_gradient": pg, "value": value, "x": x},
    )


@dataclass
class EnergySolution:
    """Optimal rho for min sum m rho^q subject to A rho >= b, with its certificate"""
    rho: np.ndarray
    multipliers: np.ndarray
    value: float
    dual_value: float
    kkt: Dict[str, Any] = field(default_factory=dict)

    @property
    def kkt_residual(self):
        return max(self.kkt["stationarity"], self.kkt["infeasibility"])


def solve_min_energy(A, b, measure, q, tol=NEWTON_TOL, smoothing_eps=SMOOTHING_EPS, x0=None):
    """Minimize sum m rho^q over rho >= 0 subject to A rho >= b (A, b nonnegative).

    Solved on the Lagrange dual: with s = A^T lam and p = q/(q-1),
    rho = (s/(q m))^(p-1) and the dual objective to minimize is
    -b.lam + (1/p) sum s^p / (q m)^(p-1). A Newton run that stalls is still
    accepted when the rescaled feasible primal and the dual agree to
    CERTIFIED_GAP_TOL; the returned rho is then exactly feasible.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    m = np.asarray(measure, dtype=float)
    if q <= 1:
        raise ValueError(f"exponent q must exceed 1, got {q}")
    p = q / (q - 1)
    qm = q * m

    if A.shape[0] == 0 or not np.any(b > 0):
        rho = np.zeros(A.shape[1])
        return EnergySolution(rho, np.zeros(A.shape[0]), 0.0, 0.0,
                              {"stationarity": 0.0, "infeasibility": 0.0, "slackness": 0.0, "iterations": 0})

    def primal(lam):
        s = A.T @ lam
        return s, (s / qm) ** (p - 1)

    def objective(lam):
        s, rho = primal(lam)
        value = -b @ lam + np.sum(s ** p / qm ** (p - 1)) / p
        grad = -b + A @ rho
        curvature = (p - 1) * np.maximum(s / qm, smoothing_eps) ** (p - 2) / qm
        hess = (A * curvature) @ A.T
        return value, grad, hess

    def certificate(lam):
        # scaling rho up to feasibility gives a primal bound; any lam >= 0 gives a dual bound
        _, rho = primal(lam)
        reach = A @ rho
        needed = b > 0
        if np.any(reach[needed] <= 0):
            return rho, np.inf, np.inf
        stretch = max(1.0, float(np.max(b[needed] / reach[needed])))
        rho = stretch * rho
        upper = float(np.sum(m * rho ** q))
        return rho, upper, upper + float(objective(lam)[0])

    scale = 1.0 + float(np.max(np.abs(b)))
    lam0 = np.ones(A.shape[0]) if x0 is None else np.asarray(x0, dtype=float)
    try:
        result = projected_newton(objective, lam0, tol=tol * scale, stall_tol=FEASIBILITY_TOL * scale)
    except SolverError as e:
        lam = e.diagnostics.get("x")
        if lam is None:
            raise
        rho, upper, gap = certificate(lam)
        if not gap <= CERTIFIED_GAP_TOL * (1.0 + upper):
            e.diagnostics["duality_gap"] = gap
            raise
        logging.warning(f"Energy program accepted on duality gap {gap:.3e} after: {e}")
        kkt = {
            "stationarity": e.diagnostics["projected_gradient"],
            "infeasibility": 0.0,
            "slackness": float(np.max(np.abs(lam * (A @ rho - b)), initial=0.0)),
            "iterations": e.diagnostics["iterations"],
            "duality_gap": gap,
            "certified": True,
        }
        return EnergySolution(rho, lam, upper, upper - gap, kkt)

    lam = result.x
    _, rho = primal(lam)
    slack = A @ rho - b
    value = float(np.sum(m * rho ** q))
    kkt = {
        "stationarity": result.projected_gradient,
        "infeasibility": float(np.max(np.maximum(-slack, 0.0), initial=0.0)),
        "slackness": float(np.max(np.abs(lam * slack), initial=0.0)),
        "iterations": result.iterations,
        "duality_gap": value + float(result.value),
    }
    logging.debug(f"Energy program with {A.shape[0]} constraints solved: value={value:.12e} kkt={kkt}")
    return EnergySolution(rho, lam, value, -float(result.value), kkt)
