#!/usr/bin/env python3
"""
Weak-gradient calculus toolkit - Main Runner
Hopf-Lax, modulus, Cheeger flow and Wasserstein computations on finite metric measure spaces
"""

import argparse
import logging
import os
import sys
from dataclasses import asdict
from datetime import datetime

import pandas as pd

from cheeger import (
    FlowConfig,
    default_tau,
    flow_properties_check,
    gradient_flow,
    parse_profile,
    trace_from_frame,
    trace_to_frame,
)
from config import FLOAT_FORMAT, FLOW_STEPS, LOG_FOLDER, LOG_LEVEL, OUTPUT_FOLDER, SUITES, VERSION
from fields import field_to_json, load_field
from harness import SuiteConfig, run_suite
from hopflax import (
    default_time_grid,
    dini_identity_check,
    dpm_monotonicity_check,
    dual_exponent,
    hj_subsolution_check,
    hopf_lax,
    hopf_lax_invariants_check,
)
from modulus import load_family, min_upper_gradient, modulus, slope_feasibility_check
from reporting import dump_json, emit_report
from space import load_space
from wasserstein import (
    chain_closure_check,
    dissipation_bridge_check,
    duality_check,
    kuwada_check,
    load_measure,
    wasserstein_dual,
    wasserstein_primal,
)


def setup_logging(log_level=LOG_LEVEL):
    """Setup logging configuration"""
    os.makedirs(LOG_FOLDER, exist_ok=True)

    log_filename = f"{LOG_FOLDER}/weakgrad_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"

    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_filename),
            logging.StreamHandler(sys.stdout)
        ]
    )

    return log_filename


def _checks_payload(reports):
    return [asdict(report) for report in reports]


def _output_path(args, name):
    return os.path.join(args.out, name)


def cmd_hopf_lax(args):
    space = load_space(args.space)
    f = load_field(space, args.field)
    if args.times:
        times = [float(t) for t in args.times.split(",")]
    else:
        times = default_time_grid(f, args.p).tolist()
    evaluations = {}
    for t in times:
        evaluation = hopf_lax(f, t, args.p)
        evaluations[FLOAT_FORMAT % t] = {
            "q_values": field_to_json(evaluation.q_values),
            "d_minus": dict(zip(space.ids, evaluation.d_minus.tolist())),
            "d_plus": dict(zip(space.ids, evaluation.d_plus.tolist())),
        }
    positive = [t for t in times if t > 0]
    checks = [
        dpm_monotonicity_check(f, args.p, positive),
        hj_subsolution_check(f, args.p, positive),
        dini_identity_check(f, args.p, positive),
        hopf_lax_invariants_check(f, args.p, positive),
    ]
    dump_json({"p": args.p, "evaluations": evaluations, "checks": _checks_payload(checks)},
              _output_path(args, "hopf_lax_report.json"))
    return checks


def cmd_modulus(args):
    space = load_space(args.space)
    family = load_family(space, args.family)
    solution = modulus(family, args.q, space=space)
    logging.info(f"📐 Mod_{args.q:g} of {len(family)} paths = {solution.value:.12e}")
    dump_json({
        "q": args.q,
        "value": solution.value,
        "rho": field_to_json(solution.rho),
        "active_paths": [family.paths[i].ids for i in solution.active_paths],
        "kkt": solution.kkt,
    }, _output_path(args, "modulus_report.json"))
    return []


def cmd_min_ug(args):
    space = load_space(args.space)
    f = load_field(space, args.field)
    solution = min_upper_gradient(f, args.q)
    logging.info(f"📐 Minimal {args.q:g}-upper gradient value {solution.value:.12e} "
                 f"after {solution.iterations} rounds")
    checks = [slope_feasibility_check(f, args.q, solution)]
    dump_json({
        "q": args.q,
        "value": solution.value,
        "g": field_to_json(solution.g),
        "generated_constraints": solution.generated_constraints,
        "kkt": solution.kkt,
        "checks": _checks_payload(checks),
    }, _output_path(args, "min_ug_report.json"))
    return checks


def cmd_flow(args):
    space = load_space(args.space)
    f0 = load_field(space, args.field)
    tau = args.tau if args.tau is not None else default_tau(f0, args.q)
    trace = gradient_flow(f0, FlowConfig(args.q, tau, args.steps))
    profile = parse_profile(args.phi)
    checks = [flow_properties_check(trace, profile)]
    trace_path = _output_path(args, "flow_trace.csv")
    os.makedirs(args.out, exist_ok=True)
    trace_to_frame(trace, profile).to_csv(trace_path, index=False, float_format=FLOAT_FORMAT)
    logging.info(f"💾 Trace saved to: {trace_path}")
    dump_json({"q": args.q, "tau": tau, "steps": args.steps, "profile": profile.name,
               "checks": _checks_payload(checks)}, _output_path(args, "flow_report.json"))
    return checks


def cmd_wasserstein(args):
    space = load_space(args.space)
    mu = load_measure(space, args.mu)
    nu = load_measure(space, args.nu)
    value, coupling = wasserstein_primal(mu, nu, args.p)
    logging.info(f"🚚 W_{args.p:g} = {value:.12e} (coupling support {coupling.support_size})")
    payload = {
        "p": args.p,
        "value": value,
        "coupling": {
            a: {b: float(coupling.matrix[i, j]) for j, b in enumerate(space.ids) if coupling.matrix[i, j] > 0}
            for i, a in enumerate(space.ids)
        },
    }
    checks = []
    if args.dual:
        bound, psi = wasserstein_dual(mu, nu, args.p)
        payload["dual_bound"] = bound
        payload["psi"] = field_to_json(psi)
        checks.append(duality_check(mu, nu, args.p))
        payload["checks"] = _checks_payload(checks)
    dump_json(payload, _output_path(args, "wasserstein_report.json"))
    return checks


def cmd_kuwada(args):
    space = load_space(args.space)
    q = dual_exponent(args.p)
    trace = trace_from_frame(pd.read_csv(args.trace), space, q)
    checks = [
        kuwada_check(trace, args.p),
        dissipation_bridge_check(trace, args.p),
        chain_closure_check(trace, args.p),
    ]
    dump_json({"p": args.p, "tau": trace.tau, "checks": _checks_payload(checks)},
              _output_path(args, "kuwada_report.json"))
    return checks


def cmd_suite(args):
    if args.config:
        suite_config = SuiteConfig.load(args.config, suite=args.name)
    else:
        suite_config = SuiteConfig(args.name)
    output = args.out or suite_config.output
    report = run_suite(suite_config)
    for fmt in args.format:
        emit_report(report, fmt, output)
    summary = report.summary()
    logging.info(f"📊 {summary['passed']}/{summary['total']} checks passed")
    for record in report.failures:
        logging.info(f"  • {record.instance} - {record.name} - residual {record.residual:.3e}")
    return report.failures


def build_parser():
    parser = argparse.ArgumentParser(description="Weak gradients on finite metric measure spaces")
    parser.add_argument("--log-level", default=LOG_LEVEL)
    parser.add_argument("--version", action="version", version=VERSION)
    sub = parser.add_subparsers(dest="command", required=True)

    hl = sub.add_parser("hopf-lax", help="Hopf-Lax semigroup and its Hamilton-Jacobi checks")
    hl.add_argument("--space", required=True)
    hl.add_argument("--field", required=True)
    hl.add_argument("--p", type=float, default=2.0)
    hl.add_argument("--times", help="comma separated times; default is the log-spaced grid")
    hl.set_defaults(handler=cmd_hopf_lax)

    mod = sub.add_parser("modulus", help="q-modulus of a path family")
    mod.add_argument("--space", required=True)
    mod.add_argument("--family", required=True)
    mod.add_argument("--q", type=float, default=2.0)
    mod.set_defaults(handler=cmd_modulus)

    ug = sub.add_parser("min-ug", help="minimal q-upper gradient of a field")
    ug.add_argument("--space", required=True)
    ug.add_argument("--field", required=True)
    ug.add_argument("--q", type=float, default=2.0)
    ug.set_defaults(handler=cmd_min_ug)

    flow = sub.add_parser("flow", help="implicit-Euler gradient flow of the Cheeger energy")
    flow.add_argument("--space", required=True)
    flow.add_argument("--field", required=True)
    flow.add_argument("--q", type=float, default=2.0)
    flow.add_argument("--tau", type=float)
    flow.add_argument("--steps", type=int, default=FLOW_STEPS)
    flow.add_argument("--phi", default="entropy")
    flow.set_defaults(handler=cmd_flow)

    w = sub.add_parser("wasserstein", help="exact W_p between two measures")
    w.add_argument("--space", required=True)
    w.add_argument("--mu", required=True)
    w.add_argument("--nu", required=True)
    w.add_argument("--p", type=float, default=2.0)
    w.add_argument("--dual", action="store_true")
    w.set_defaults(handler=cmd_wasserstein)

    kw = sub.add_parser("kuwada", help="Kuwada and dissipation bounds along a saved flow trace")
    kw.add_argument("--space", required=True)
    kw.add_argument("--trace", required=True)
    kw.add_argument("--p", type=float, default=2.0)
    kw.set_defaults(handler=cmd_kuwada)

    suite = sub.add_parser("suite", help="run a verification suite")
    suite.add_argument("name", choices=SUITES)
    suite.add_argument("--config")
    suite.add_argument("--format", nargs="+", default=["json", "csv"], choices=["json", "csv", "xlsx"])
    suite.set_defaults(handler=cmd_suite)

    for command in (hl, mod, ug, flow, w, kw):
        command.add_argument("--out", default=OUTPUT_FOLDER)
    suite.add_argument("--out")
    return parser


def main(argv=None):
    """Main execution function"""
    args = build_parser().parse_args(argv)
    log_file = setup_logging(args.log_level)
    logger = logging.getLogger(__name__)

    logger.info("=" * 60)
    logger.info(f"🚀 Weak-gradient toolkit {VERSION} Started: {args.command}")
    logger.info(f"📅 Run Date: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    logger.info(f"📝 Log File: {log_file}")
    logger.info("=" * 60)

    try:
        checks = args.handler(args)
    except Exception as e:
        logger.error(f"💥 Critical error: {str(e)}")
        return 1

    failed = [c for c in checks if not c.passed]
    if failed:
        logger.error(f"❌ {len(failed)} checks failed: {', '.join(sorted({c.name for c in failed}))}")
        return 1
    logger.info("✅ Execution completed!")
    return 0


if __name__ == "__main__":
    sys.exit(main())
