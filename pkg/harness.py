"""
Seeded experiment suites that bind the modules into end-to-end property checks
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from typing import Dict, List

import numpy as np
import pandas as pd

import config
from cheeger import (
    FlowConfig,
    default_tau,
    dissipation_order_check,
    equality_branch_check,
    flow_properties_check,
    gradient_flow,
    homogeneity_check,
    integration_by_parts_check,
    parse_profile,
)
from fields import ScalarField, discrete_slope
from hopflax import (
    default_time_grid,
    dini_identity_check,
    dpm_monotonicity_check,
    dual_exponent,
    hj_subsolution_check,
    hopf_lax_invariants_check,
)
from modulus import (
    brute_force_min_upper_gradient,
    homogeneity_ug_check,
    min_upper_gradient,
    modulus_monotonicity_check,
    plan_modulus_inequality,
    random_family,
    random_plan,
    slope_feasibility_check,
    weak_ug_check,
)
from reporting import CheckReport, ReportProcessor, combine_reports, provenance
from space import grid_coordinates, grid_graph, path_graph, random_space
from wasserstein import (
    DualAscentConfig,
    ProbMeasure,
    chain_closure_check,
    dissipation_bridge_check,
    duality_check,
    kuwada_check,
    kuwada_halving_check,
    metric_axioms_check,
    p_monotonicity_check,
    wasserstein_dual,
    wasserstein_primal,
)


class ConfigError(ValueError):
    pass


def _tunable_constants():
    names = {}
    for name in dir(config):
        value = getattr(config, name)
        if name.isupper() and isinstance(value, (int, float)) and not isinstance(value, bool):
            names[name] = value
    return names


@dataclass
class SuiteConfig:
    suite: str
    seeds: List[int] = None
    sizes: List[int] = None
    exponents: List[float] = None
    tolerances: Dict[str, float] = field(default_factory=dict)
    output: str = config.OUTPUT_FOLDER

    def __post_init__(self):
        if self.suite not in config.SUITES:
            raise ConfigError(f"unknown suite '{self.suite}', expected one of {', '.join(config.SUITES)}")
        defaults = config.SUITE_DEFAULTS[self.suite]
        for key in ("seeds", "sizes", "exponents"):
            if getattr(self, key) is None:
                setattr(self, key, list(defaults[key]))
            elif not len(getattr(self, key)):
                raise ConfigError(f"{key} must not be empty")
        self.seeds = [int(s) for s in self.seeds]
        self.sizes = [int(n) for n in self.sizes]
        self.exponents = [float(p) for p in self.exponents]
        if min(self.sizes) < 2:
            raise ConfigError(f"sizes must be at least 2, got {self.sizes}")
        if min(self.exponents) <= 1:
            raise ConfigError(f"exponents must exceed 1, got {self.exponents}")

        known = _tunable_constants()
        normalized = {}
        for name, value in (self.tolerances or {}).items():
            key = name.upper()
            if key not in known:
                raise ConfigError(f"unknown tolerance '{name}'")
            if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"tolerance '{name}' must be a positive number, got {value!r}")
            normalized[key] = float(value)
        self.tolerances = normalized

    @classmethod
    def from_json(cls, doc):
        unknown = set(doc) - {"suite", "seeds", "sizes", "exponents", "tolerances", "output"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "suite" not in doc:
            raise ConfigError("config needs a 'suite' name")
        return cls(**doc)

    @classmethod
    def load(cls, path, suite=None):
        with open(path, "r") as f:
            doc = json.load(f)
        if suite is not None:
            if doc.get("suite", suite) != suite:
                raise ConfigError(f"config is for suite '{doc['suite']}', not '{suite}'")
            doc["suite"] = suite
        return cls.from_json(doc)

    def tolerance(self, name):
        """Override from the config file, else the module constant"""
        return self.tolerances.get(name, getattr(config, name))

    def payload(self):
        return asdict(self)


class _InstanceResult:
    """Checks for one instance; a failing check does not stop the others"""

    def __init__(self, instance):
        self.instance = instance
        self.reports = []
        self.errors = []
        self.rows = {}

    def run(self, name, check, note=""):
        try:
            report = check()
        except Exception as e:
            self.errors.append((name, e))
            return None
        self.reports.append((report, note))
        return report

    def add_row(self, table, row):
        self.rows.setdefault(table, []).append(row)


def _instance_name(seed, n, p):
    return f"seed={seed:04d}/n={n:03d}/p={p:g}"


def _random_field(space, seed, low=-1.0, high=1.0, stream=101):
    rng = np.random.default_rng([int(seed), stream])
    return ScalarField(space, rng.uniform(low, high, size=space.n))


def _hj_instance(cfg, seed, n, p):
    result = _InstanceResult(_instance_name(seed, n, p))
    space = random_space(seed, n)
    f = _random_field(space, seed)
    grid = default_time_grid(f, p, points=int(cfg.tolerance("DEFAULT_TIME_POINTS")))
    step = cfg.tolerance("FD_RELATIVE_STEP")
    result.run("dpm_monotone", lambda: dpm_monotonicity_check(f, p, grid))
    result.run("hj_subsolution", lambda: hj_subsolution_check(f, p, grid, tol_factor=cfg.tolerance("HJ_TOL"), step=step))
    result.run("dini_identity", lambda: dini_identity_check(f, p, grid, step=step))
    result.run("hopf_lax_invariants", lambda: hopf_lax_invariants_check(f, p, grid))
    return result


def _brute_force_report(f, q, solution):
    oracle = brute_force_min_upper_gradient(f, q)
    gap = abs(solution.value - oracle.value)
    tol = config.BRUTE_FORCE_TOL * (1.0 + oracle.value)
    return CheckReport("ug_brute_force", gap <= tol, gap, tol, {"oracle": oracle.value, "generated": solution.value})


def _modulus_instance(cfg, seed, n, p):
    q = dual_exponent(p)
    result = _InstanceResult(_instance_name(seed, n, p))
    space = random_space(seed, n)
    f = _random_field(space, seed)
    solution = min_upper_gradient(f, q, max_rounds=int(cfg.tolerance("MAX_OUTER_ROUNDS")),
                                  tol=cfg.tolerance("ORACLE_TOL"))
    result.run("slope_feasibility", lambda: slope_feasibility_check(f, q, solution, tol=cfg.tolerance("FEASIBILITY_TOL")))
    if n <= 6:
        result.run("ug_brute_force", lambda: _brute_force_report(f, q, solution))
    result.run("ug_homogeneity", lambda: homogeneity_ug_check(f, q))

    # same seed, so the first three walks of the larger family are the smaller family
    smaller = random_family(space, seed, size=3)
    larger = random_family(space, seed, size=5)
    tol = cfg.tolerance("WEAK_DUALITY_TOL")
    result.run("modulus_monotone", lambda: modulus_monotonicity_check(smaller, larger, q, tol=tol))
    plans = [random_plan(space, 2 * seed), random_plan(space, 2 * seed + 1)]
    for k, plan in enumerate(plans):
        family = random_family(space, 2 * seed + k, base=plan)
        result.run("plan_modulus", lambda plan=plan, family=family: plan_modulus_inequality(plan, family, q, tol=tol),
                   note=f"plan {k}")
    result.run("weak_upper_gradient", lambda: weak_ug_check(f, solution.g, plans, tol=cfg.tolerance("FEASIBILITY_TOL")))
    return result


def _flow_instance(cfg, seed, n, p):
    q = dual_exponent(p)
    result = _InstanceResult(_instance_name(seed, n, p))
    space = random_space(seed, n)
    f0 = _random_field(space, seed, 0.5, 1.5)
    tau = default_tau(f0, q, factor=cfg.tolerance("DEFAULT_TAU_FACTOR"))
    flow_config = FlowConfig(q, tau, config.FLOW_STEPS, inner_tol=cfg.tolerance("INNER_TOL"))
    trace = gradient_flow(f0, flow_config)
    profile = parse_profile("entropy")

    ibp_tol = cfg.tolerance("IBP_TOL")
    result.run("flow_properties", lambda: flow_properties_check(
        trace, profile, mass_tol=cfg.tolerance("MASS_TOL"), max_tol=cfg.tolerance("MAX_PRINCIPLE_TOL"),
        inner_tol=cfg.tolerance("INNER_TOL"), band_tol=ibp_tol))
    g = _random_field(space, seed, stream=211)
    result.run("integration_by_parts", lambda: combine_reports(
        "integration_by_parts", [integration_by_parts_check(s, g, q, tol=ibp_tol) for s in trace.steps]))
    result.run("ibp_equality", lambda: combine_reports(
        "ibp_equality", [equality_branch_check(s, lambda z: 2.0 * z + 1.0, q, tol=ibp_tol) for s in trace.steps]))
    result.run("dissipation_order", lambda: dissipation_order_check(
        f0, q, profile, min_order=cfg.tolerance("MIN_ORDER")))
    result.run("homogeneity", lambda: homogeneity_check(f0, FlowConfig(q, tau, 3)))

    slack = cfg.tolerance("KUWADA_SLACK")
    result.run("kuwada", lambda: kuwada_check(trace, p, slack=slack))
    result.run("dissipation_bridge", lambda: dissipation_bridge_check(trace, p, slack=slack))
    result.run("chain_closure", lambda: chain_closure_check(trace, p, slack=slack))

    halving = result.run("kuwada_halving", lambda: kuwada_halving_check(
        f0, p, tau, config.FLOW_STEPS, halvings=int(cfg.tolerance("KUWADA_HALVINGS")), slack=slack,
        shrink=cfg.tolerance("KUWADA_SHRINK"), trace=trace))
    if halving is not None:
        for row in halving.details["rows"]:
            result.add_row("kuwada_halving", {"instance": result.instance, **row})
    return result


def _random_measure(space, rng):
    return ProbMeasure(space, rng.dirichlet(np.ones(space.n)))


def _cold_start_report(mu, nu, p, tol):
    primal, _ = wasserstein_primal(mu, nu, p)
    target = primal ** p / p
    bound, _ = wasserstein_dual(mu, nu, p, DualAscentConfig(warm_start=False))
    return CheckReport("weak_duality_cold", bound <= target + tol, bound - target, tol,
                       {"dual": bound, "primal": target})


def _duality_instance(cfg, seed, n, p):
    result = _InstanceResult(_instance_name(seed, n, p))
    space = random_space(seed, n)
    rng = np.random.default_rng([int(seed), 307])
    mu, nu, third = (_random_measure(space, rng) for _ in range(3))
    ascent = DualAscentConfig(iterations=int(cfg.tolerance("DUAL_ASCENT_ITERATIONS")))
    tol = cfg.tolerance("WEAK_DUALITY_TOL")
    marginal_tol = cfg.tolerance("MARGINAL_TOL")

    def marginals():
        _, coupling = wasserstein_primal(mu, nu, p)
        error = coupling.marginal_error(mu, nu)
        return CheckReport("coupling_marginals", error <= marginal_tol, error, marginal_tol,
                           {"support": coupling.support_size})

    result.run("coupling_marginals", marginals)
    result.run("duality", lambda: duality_check(mu, nu, p, ascent, tol=tol, gap_factor=cfg.tolerance("DUAL_GAP_FACTOR")))
    result.run("weak_duality_cold", lambda: _cold_start_report(mu, nu, p, tol))
    result.run("w_metric", lambda: metric_axioms_check([mu, nu, third], p, tol=marginal_tol))
    result.run("w_p_monotonicity", lambda: p_monotonicity_check(mu, nu, p, p + 1.0, tol=marginal_tol))
    return result


def _gradient_functionals(f, q):
    solution = min_upper_gradient(f, q)
    slope_value = discrete_slope(f).energy(q)
    ug_root = solution.value ** (1 / q)
    slope_root = slope_value ** (1 / q)
    return solution, {
        "q": q,
        "min_ug": solution.value,
        "slope": slope_value,
        "min_ug_root": ug_root,
        "slope_root": slope_root,
        "gap": abs(ug_root - slope_root),
    }


def _identification_path(cfg, n, p):
    q = dual_exponent(p)
    result = _InstanceResult(f"path/n={n:03d}/q={q:g}")
    space = path_graph(n)
    f = ScalarField(space, np.linspace(0.0, 1.0, n))
    solution, row = _gradient_functionals(f, q)
    bound = 5.0 / n
    ug_error = abs(row["min_ug_root"] - 1.0)
    slope_error = abs(row["slope_root"] - 1.0)
    result.reports.append((CheckReport("identification_ug", ug_error <= bound, ug_error, bound), ""))
    result.reports.append((CheckReport("identification_slope", slope_error <= bound, slope_error, bound), ""))
    result.add_row("refinement", {"kind": "path", "n": n, **row})

    for r in config.R_VS_Q_EXPONENTS:
        result.run("r_vs_q", lambda r=r: _r_vs_q_report(result, f, q, r, solution), note=f"r={r:g} informational")
    return result


def _r_vs_q_report(result, f, q, r, solution):
    other = min_upper_gradient(f, r)
    spread = float(np.max(np.abs(other.g.values - solution.g.values)))
    result.add_row("r_vs_q", {"n": f.space.n, "q": q, "r": r, "max_difference": spread})
    return CheckReport("r_vs_q", True, spread, None, {"r": r})


def _identification_grid(cfg, k, p):
    q = dual_exponent(p)
    result = _InstanceResult(f"grid/k={k:02d}/q={q:g}")
    space = grid_graph(k)
    f = ScalarField(space, grid_coordinates(space)[:, 0])
    _, row = _gradient_functionals(f, q)
    result.reports.append((CheckReport("identification_grid", True, row["gap"], None), "informational"))
    result.add_row("refinement", {"kind": "grid", "n": space.n, **row})
    return result


def _gap_monotone_reports(rows):
    reports = []
    paths = pd.DataFrame([r for r in rows if r["kind"] == "path"])
    if paths.empty:
        return reports
    for q, group in paths.groupby("q"):
        gaps = group.sort_values("n")["gap"].to_numpy()
        rise = float(np.max(np.diff(gaps), initial=0.0))
        tol = config.GAP_MONOTONE_TOL
        reports.append((f"path/q={q:g}", CheckReport("identification_gap_monotone", rise <= tol, rise, tol,
                                                     {"gaps": gaps.tolist()})))
    return reports


def _suite_jobs(cfg):
    """(instance, thunk) pairs for the configured suite"""
    builders = {
        "hj": _hj_instance,
        "modulus": _modulus_instance,
        "flow": _flow_instance,
        "duality": _duality_instance,
    }
    if cfg.suite in builders:
        build = builders[cfg.suite]
        return [
            (_instance_name(seed, n, p), lambda seed=seed, n=n, p=p: build(cfg, seed, n, p))
            for seed in cfg.seeds for n in cfg.sizes for p in cfg.exponents
        ]
    jobs = []
    for p in cfg.exponents:
        q = dual_exponent(p)
        for n in cfg.sizes:
            jobs.append((f"path/n={n:03d}/q={q:g}", lambda n=n, p=p: _identification_path(cfg, n, p)))
        for k in config.GRID_SIZES:
            jobs.append((f"grid/k={k:02d}/q={q:g}", lambda k=k, p=p: _identification_grid(cfg, k, p)))
    return jobs


def run_suite(suite_config):
    """Run every instance of a suite and merge the records into a SuiteReport"""
    cfg = suite_config
    processor = ReportProcessor(cfg.suite, provenance(cfg.suite, cfg.seeds, cfg.payload()))
    jobs = _suite_jobs(cfg)
    tables = {}
    logging.info(f"Running suite '{cfg.suite}' with {len(jobs)} instances on {config.CONCURRENT_WORKERS} workers")

    with ThreadPoolExecutor(max_workers=config.CONCURRENT_WORKERS) as executor:
        future_to_instance = {executor.submit(job): instance for instance, job in jobs}

        for future in as_completed(future_to_instance):
            instance = future_to_instance[future]
            try:
                result = future.result()
            except Exception as e:
                processor.add_error(instance, f"{cfg.suite}_instance", e)
                continue
            for report, note in result.reports:
                processor.add_report(result.instance, report, note)
            for name, exc in result.errors:
                processor.add_error(result.instance, name, exc)
            for table, rows in result.rows.items():
                tables.setdefault(table, []).extend(rows)

    if cfg.suite == "identification":
        for instance, report in _gap_monotone_reports(tables.get("refinement", [])):
            processor.add_report(instance, report)

    for name, rows in tables.items():
        frame = pd.DataFrame(rows)
        order = [c for c in ("kind", "instance", "n", "q", "r", "tau") if c in frame.columns]
        processor.add_table(name, frame.sort_values(order).reset_index(drop=True))

    report = processor.build()
    stats = processor.get_processing_stats()
    logging.info(f"Suite '{cfg.suite}' finished: {stats['passed']} passed, {stats['failed']} failed, "
                 f"{stats['errors']} errors")
    return report
