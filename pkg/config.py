"""
Configuration for the weak-gradient calculus toolkit
"""

VERSION = "0.3.0"
SCHEMA_VERSION = 2

# Space construction
RANDOM_EDGE_DENSITY = 0.4
RANDOM_WEIGHT_RANGE = (0.5, 1.5)
RANDOM_MEASURE_RANGE = (0.5, 1.5)
MAX_RETRIES = 100  # attempts for random_space before giving up
METRIC_TOL = 1e-12

# Upper gradients and path integrals
UPPER_GRADIENT_TOL = 1e-12
BRUTE_FORCE_MAX_N = 7

# Hopf-Lax
ARGMIN_TOL = 1e-12
KINK_GAP = 1e-9
KINK_MARGINAL_FACTOR = 100.0  # gaps within this factor of KINK_GAP get flagged
FD_RELATIVE_STEP = 1e-5
DERIVATIVE_REL_TOL = 1e-4
DERIVATIVE_ABS_TOL = 1e-9
HJ_TOL = 1e-6
DEFAULT_TIME_POINTS = 32
TIME_RANGE = (1e-2, 10.0)

# Modulus / minimal upper gradient
FEASIBILITY_TOL = 1e-9
KKT_TOL = 1e-9
CERTIFIED_GAP_TOL = 1e-9  # relative primal/dual gap that certifies a stalled energy solve
SLACKNESS_TOL = 1e-7
ORACLE_TOL = 1e-10
MAX_OUTER_ROUNDS = 500
PLAN_GRID_POINTS = 64

# Projected Newton
NEWTON_MAX_ITER = 500
NEWTON_TOL = 1e-12
SMOOTHING_EPS = 1e-8
ARMIJO_SIGMA = 1e-4
ARMIJO_BETA = 0.5

# Cheeger flow
DEFAULT_TAU_FACTOR = 0.1
INNER_TOL = 1e-11
MASS_TOL = 1e-8
MAX_PRINCIPLE_TOL = 1e-10
MIN_ORDER = 0.9
HALVING_TAUS = (4e-2, 2e-2, 1e-2)
ORDER_HORIZON_STEPS = 25  # order window, in coarse steps
ORDER_LAYER_STEPS = 5
IBP_TOL = 1e-7

# Wasserstein
MARGINAL_TOL = 1e-10
DENSITY_FLOOR = 1e-12
DUAL_ASCENT_ITERATIONS = 500
DUAL_GAP_FACTOR = 1e-4
KUWADA_SLACK = 0.10
KUWADA_HALVINGS = 3
KUWADA_SHRINK = 0.9  # bound on the fine/coarse ratio of the worst allowance draw
WEAK_DUALITY_TOL = 1e-9

# Harness
SUITES = ("hj", "modulus", "flow", "duality", "identification")
SUITE_DEFAULTS = {
    "hj": {"seeds": list(range(50)), "sizes": [12], "exponents": [1.5, 2.0, 3.0]},
    "modulus": {"seeds": list(range(50)), "sizes": [6], "exponents": [1.5, 2.0, 3.0]},
    "flow": {"seeds": list(range(10)), "sizes": [8], "exponents": [2.0]},
    "duality": {"seeds": list(range(20)), "sizes": [8], "exponents": [1.5, 2.0, 3.0]},
    "identification": {"seeds": [0], "sizes": [8, 16, 32, 64], "exponents": [2.0]},
}
FLOW_STEPS = 10
BRUTE_FORCE_TOL = 1e-7
GAP_MONOTONE_TOL = 1e-7
GRID_SIZES = (3, 4, 5, 6)  # k x k grids, informational only
R_VS_Q_EXPONENTS = (1.5, 2.0, 3.0)
CONCURRENT_WORKERS = 3
FLOAT_FORMAT = "%.12e"
OUTPUT_FOLDER = "data/output"

# Logging Configuration
LOG_FOLDER = "logs"
LOG_LEVEL = "INFO"
