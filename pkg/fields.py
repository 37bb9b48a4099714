"""
Scalar fields, gradient candidates, edge paths and line integrals on a finite space
"""

import json
import logging

import networkx as nx
import numpy as np
from scipy.optimize import minimize_scalar

from config import UPPER_GRADIENT_TOL
from reporting import CheckReport
from space import SpaceError


class ScalarField:
    """Real values per point of a space"""

    def __init__(self, space, values):
        values = np.array(values, dtype=float).reshape(-1)
        if values.shape[0] != space.n:
            raise ValueError(f"field has {values.shape[0]} entries, space has {space.n} points")
        if not np.all(np.isfinite(values)):
            raise ValueError("field entries must be finite")
        values.setflags(write=False)
        self.space = space
        self.values = values

    def __len__(self):
        return self.space.n

    def __repr__(self):
        return f"{type(self).__name__}({np.array2string(self.values, precision=4)})"

    def __getitem__(self, i):
        return self.values[i]

    def with_values(self, values):
        return ScalarField(self.space, values)

    def scaled(self, factor):
        return type(self)(self.space, factor * self.values)


class GradientField(ScalarField):
    """Nonnegative values per point (candidate upper gradients, densities rho)"""

    def __init__(self, space, values):
        super().__init__(space, values)
        if np.any(self.values < 0):
            raise ValueError("gradient field entries must be nonnegative")

    def energy(self, q):
        """Sum of m * g^q"""
        return float(np.sum(self.space.measure * self.values ** q))


class DiscretePath:
    """Edge path x_0, ..., x_k, traversed at constant speed on [0, 1]"""

    def __init__(self, space, vertices):
        vertices = tuple(int(v) for v in vertices)
        if len(vertices) < 2:
            raise SpaceError("a path needs at least one edge")
        for a, b in zip(vertices[:-1], vertices[1:]):
            if not space.has_edge(a, b):
                raise SpaceError(f"path step {space.ids[a]} -> {space.ids[b]} is not an edge")
        self.space = space
        self.vertices = vertices
        self.edge_lengths = np.array([space.edge_length(a, b) for a, b in zip(vertices[:-1], vertices[1:])])
        self.length = float(self.edge_lengths.sum())
        self.cumulative = np.concatenate([[0.0], np.cumsum(self.edge_lengths)])

    @classmethod
    def from_ids(cls, space, ids):
        return cls(space, [space.index(i) for i in ids])

    def __repr__(self):
        return f"DiscretePath({'->'.join(self.ids)})"

    def __len__(self):
        return len(self.vertices)

    def __eq__(self, other):
        return isinstance(other, DiscretePath) and self.space is other.space and self.vertices == other.vertices

    def __hash__(self):
        return hash(self.vertices)

    @property
    def ids(self):
        return [self.space.ids[v] for v in self.vertices]

    @property
    def start(self):
        return self.vertices[0]

    @property
    def end(self):
        return self.vertices[-1]

    @property
    def canonical_key(self):
        """Orientation-free key; a path and its reversal share it"""
        return min(self.vertices, self.vertices[::-1])

    @property
    def breakpoints(self):
        """Constant-speed parameters at which the path sits on each vertex"""
        return self.cumulative / self.length

    def coefficients(self):
        """Trapezoid weights: path_integral(g) == coefficients() @ g.values"""
        coef = np.zeros(self.space.n)
        np.add.at(coef, np.array(self.vertices[:-1]), self.edge_lengths / 2)
        np.add.at(coef, np.array(self.vertices[1:]), self.edge_lengths / 2)
        return coef

    def reversed(self):
        return DiscretePath(self.space, self.vertices[::-1])


def discrete_slope(f):
    """slope(x) = max over edge-neighbours y of |f(y) - f(x)| / w(x, y)"""
    space = f.space
    slope = np.zeros(space.n)
    if len(space.edges):
        quotients = np.abs(f.values[space.edge_v] - f.values[space.edge_u]) / space.edge_w
        np.maximum.at(slope, space.edge_u, quotients)
        np.maximum.at(slope, space.edge_v, quotients)
    return GradientField(space, slope)


def global_lipschitz(f):
    space = f.space
    if space.n < 2:
        return 0.0
    diffs = np.abs(f.values[:, None] - f.values[None, :])
    off = ~np.eye(space.n, dtype=bool)
    return float(np.max(diffs[off] / space.dist[off]))


def path_integral(g, path):
    """Trapezoid line integral of g along the path"""
    values = g.values[np.array(path.vertices)]
    return float(np.sum((values[:-1] + values[1:]) / 2 * path.edge_lengths))


def path_energy(path, p):
    """Integral of |speed|^p over [0, 1]; the speed is constant and equal to the length"""
    if p <= 1:
        raise ValueError(f"exponent must exceed 1, got {p}")
    return path.length ** p


def restrict_path(path, t, s, tol=1e-12):
    """Sub-path between vertex-aligned parameters t < s, re-parametrized on [0, 1]"""
    if not 0 <= t < s <= 1:
        raise ValueError(f"need 0 <= t < s <= 1, got t={t}, s={s}")
    marks = path.breakpoints
    start = np.flatnonzero(np.abs(marks - t) <= tol)
    stop = np.flatnonzero(np.abs(marks - s) <= tol)
    if not len(start) or not len(stop):
        raise ValueError(f"cut points ({t}, {s}) are not vertex-aligned on {path}")
    return DiscretePath(path.space, path.vertices[start[0]:stop[-1] + 1])


def is_upper_gradient(f, g, paths, tol=UPPER_GRADIENT_TOL):
    """Residual |f(end) - f(start)| - integral of g, worst over the given paths"""
    worst, witness = -np.inf, None
    for path in paths:
        residual = abs(f.values[path.end] - f.values[path.start]) - path_integral(g, path)
        if residual > worst:
            worst, witness = residual, path
    if witness is None:
        return CheckReport("upper_gradient", True, 0.0, tol, {"paths": 0})
    return CheckReport(
        "upper_gradient",
        bool(worst <= tol),
        float(worst),
        tol,
        {"paths": len(paths), "witness": witness.ids},
    )


def simple_paths(space, max_vertices=None):
    """Every simple edge-path between every unordered pair of points"""
    graph = space.graph()
    cutoff = None if max_vertices is None else max_vertices - 1
    paths = []
    for a in range(space.n):
        for b in range(a + 1, space.n):
            for vertices in nx.all_simple_paths(graph, a, b, cutoff=cutoff):
                paths.append(DiscretePath(space, vertices))
    logging.debug(f"Enumerated {len(paths)} simple paths on {space}")
    return paths


def closed_neighborhood(space, x):
    return [x] + [y for y, _ in space.neighbors(x)]


def locality_check(f, h, tol=0.0):
    """Where f == h on a closed neighbourhood, their slopes agree at its centre"""
    space = f.space
    slope_f = discrete_slope(f).values
    slope_h = discrete_slope(h).values
    worst, checked = 0.0, 0
    for x in range(space.n):
        hood = closed_neighborhood(space, x)
        if np.array_equal(f.values[hood], h.values[hood]):
            checked += 1
            worst = max(worst, abs(slope_f[x] - slope_h[x]))
    return CheckReport("locality", bool(worst <= tol), float(worst), tol, {"vertices_checked": checked})


def _max_abs_derivative(dphi, lo, hi, samples=257):
    if hi <= lo:
        return abs(float(dphi(lo)))
    grid = np.linspace(lo, hi, samples)
    values = np.abs(np.array([dphi(z) for z in grid], dtype=float))
    k = int(values.argmax())
    best = float(values[k])
    left, right = grid[max(k - 1, 0)], grid[min(k + 1, samples - 1)]
    if right > left:
        refined = minimize_scalar(lambda z: -abs(float(dphi(z))), bounds=(left, right), method="bounded",
                                  options={"xatol": 1e-12})
        best = max(best, -float(refined.fun))
    return best


def chain_rule_check(f, phi, dphi, rel_tol=1e-9):
    """slope(phi o f)(x) <= L(x) * slope(f)(x), L(x) = max |phi'| over f's range on the closed neighbourhood"""
    space = f.space
    composed = ScalarField(space, [phi(v) for v in f.values])
    slope_composed = discrete_slope(composed).values
    slope_f = discrete_slope(f).values
    worst, witness = -np.inf, None
    for x in range(space.n):
        hood = f.values[closed_neighborhood(space, x)]
        bound = _max_abs_derivative(dphi, float(hood.min()), float(hood.max())) * slope_f[x]
        residual = slope_composed[x] - bound - rel_tol * (1 + bound)
        if residual > worst:
            worst, witness = residual, space.ids[x]
    return CheckReport("chain_rule", bool(worst <= 0), float(worst), 0.0, {"witness": witness})


def field_to_json(f):
    return {node_id: float(v) for node_id, v in zip(f.space.ids, f.values)}


def field_from_json(space, doc, kind=ScalarField):
    """Field from {id: value}, or from a plain list in node order"""
    if isinstance(doc, dict):
        missing = set(space.ids) - set(map(str, doc))
        if missing:
            raise ValueError(f"field is missing values for {sorted(missing)}")
        values = [doc[node_id] for node_id in space.ids]
    else:
        values = list(doc)
    return kind(space, values)


def load_field(space, path, kind=ScalarField):
    with open(path, "r") as f:
        return field_from_json(space, json.load(f), kind)


def path_to_json(path):
    return path.ids


def path_from_json(space, doc):
    return DiscretePath.from_ids(space, doc)
